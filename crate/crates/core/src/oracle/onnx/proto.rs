//! Protocol-buffer decoding of the ONNX model subset needed for inference.

use super::tensor::{Data, Tensor};
use crate::error::{Error, Result};

const WIRE_VARINT: u8 = 0;
const WIRE_I64: u8 = 1;
const WIRE_LEN: u8 = 2;
const WIRE_I32: u8 = 5;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    /// Absolute offset of `buf[0]` in the file, for error messages.
    base: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], base: usize) -> Self {
        Self { buf, pos: 0, base }
    }

    fn done(&self) -> bool {
        self.pos >= self.buf.len()
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: (self.base + self.pos) as u64,
            message: message.into(),
        }
    }

    fn varint(&mut self) -> Result<u64> {
        let mut value = 0u64;
        for shift in (0..64).step_by(7) {
            let byte = *self.buf.get(self.pos).ok_or_else(|| self.err("truncated varint"))?;
            self.pos += 1;
            value |= u64::from(byte & 0x7f) << shift;
            if byte & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(self.err("varint longer than 10 bytes"))
    }

    fn key(&mut self) -> Result<(u32, u8)> {
        let k = self.varint()?;
        Ok(((k >> 3) as u32, (k & 7) as u8))
    }

    fn fixed<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let bytes = self.buf.get(self.pos..end).ok_or_else(|| self.err("truncated fixed-width field"))?;
        self.pos = end;
        Ok(bytes.try_into().expect("slice of length N"))
    }

    fn bytes(&mut self) -> Result<Reader<'a>> {
        let len = self.varint()? as usize;
        let start = self.pos;
        let end = start.checked_add(len).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| self.err(format!("length {len} runs past end of message")))?;
        self.pos = end;
        Ok(Reader::new(&self.buf[start..end], self.base + start))
    }

    fn string(&mut self) -> Result<String> {
        let r = self.bytes()?;
        String::from_utf8(r.buf.to_vec()).map_err(|_| r.err("string is not UTF-8"))
    }

    fn skip(&mut self, wire: u8) -> Result<()> {
        match wire {
            WIRE_VARINT => self.varint().map(drop),
            WIRE_I64 => self.fixed::<8>().map(drop),
            WIRE_LEN => self.bytes().map(drop),
            WIRE_I32 => self.fixed::<4>().map(drop),
            other => Err(self.err(format!("unsupported wire type {other}"))),
        }
    }

    /// A repeated int64 field, packed or not.
    fn push_i64s(&mut self, wire: u8, out: &mut Vec<i64>) -> Result<()> {
        if wire == WIRE_LEN {
            let mut r = self.bytes()?;
            while !r.done() {
                out.push(r.varint()? as i64);
            }
        } else {
            out.push(self.varint()? as i64);
        }
        Ok(())
    }

    fn push_f32s(&mut self, wire: u8, out: &mut Vec<f32>) -> Result<()> {
        if wire == WIRE_LEN {
            let mut r = self.bytes()?;
            while !r.done() {
                out.push(f32::from_le_bytes(r.fixed()?));
            }
        } else {
            out.push(f32::from_le_bytes(self.fixed()?));
        }
        Ok(())
    }

    fn push_f64s(&mut self, wire: u8, out: &mut Vec<f64>) -> Result<()> {
        if wire == WIRE_LEN {
            let mut r = self.bytes()?;
            while !r.done() {
                out.push(f64::from_le_bytes(r.fixed()?));
            }
        } else {
            out.push(f64::from_le_bytes(self.fixed()?));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub(crate) struct ModelProto {
    pub opsets: Vec<(String, i64)>,
    pub graph: GraphProto,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct GraphProto {
    pub nodes: Vec<NodeProto>,
    pub initializers: Vec<(String, Tensor)>,
    pub inputs: Vec<ValueInfo>,
    pub outputs: Vec<ValueInfo>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct NodeProto {
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub name: String,
    pub op_type: String,
    pub domain: String,
    pub attributes: Vec<Attribute>,
}

#[derive(Debug, Clone)]
pub(crate) struct Attribute {
    pub name: String,
    pub value: AttrValue,
}

#[derive(Debug, Clone)]
pub(crate) enum AttrValue {
    Float(f32),
    Int(i64),
    String(String),
    Tensor(Tensor),
    Floats(Vec<f32>),
    Ints(Vec<i64>),
    Other,
}

/// Graph input or output; `dims` entries are `None` for symbolic dimensions.
#[derive(Debug, Clone, Default)]
pub(crate) struct ValueInfo {
    pub name: String,
    pub elem_type: i32,
    pub dims: Option<Vec<Option<i64>>>,
}

pub(crate) fn parse_model(bytes: &[u8]) -> Result<ModelProto> {
    let mut r = Reader::new(bytes, 0);
    let mut model = ModelProto::default();
    let mut saw_graph = false;
    while !r.done() {
        let (field, wire) = r.key()?;
        match (field, wire) {
            (7, WIRE_LEN) => {
                model.graph = parse_graph(r.bytes()?)?;
                saw_graph = true;
            }
            (8, WIRE_LEN) => {
                let mut o = r.bytes()?;
                let (mut domain, mut version) = (String::new(), 0);
                while !o.done() {
                    match o.key()? {
                        (1, WIRE_LEN) => domain = o.string()?,
                        (2, WIRE_VARINT) => version = o.varint()? as i64,
                        (_, w) => o.skip(w)?,
                    }
                }
                model.opsets.push((domain, version));
            }
            (_, w) => r.skip(w)?,
        }
    }
    if !saw_graph {
        return Err(Error::Parse { offset: 0, message: "not an ONNX model: no graph".into() });
    }
    Ok(model)
}

fn parse_graph(mut r: Reader) -> Result<GraphProto> {
    let mut g = GraphProto::default();
    while !r.done() {
        match r.key()? {
            (1, WIRE_LEN) => g.nodes.push(parse_node(r.bytes()?)?),
            (5, WIRE_LEN) => g.initializers.push(parse_tensor(r.bytes()?)?),
            (11, WIRE_LEN) => g.inputs.push(parse_value_info(r.bytes()?)?),
            (12, WIRE_LEN) => g.outputs.push(parse_value_info(r.bytes()?)?),
            (_, w) => r.skip(w)?,
        }
    }
    Ok(g)
}

fn parse_node(mut r: Reader) -> Result<NodeProto> {
    let mut n = NodeProto::default();
    while !r.done() {
        match r.key()? {
            (1, WIRE_LEN) => n.inputs.push(r.string()?),
            (2, WIRE_LEN) => n.outputs.push(r.string()?),
            (3, WIRE_LEN) => n.name = r.string()?,
            (4, WIRE_LEN) => n.op_type = r.string()?,
            (5, WIRE_LEN) => n.attributes.push(parse_attribute(r.bytes()?)?),
            (7, WIRE_LEN) => n.domain = r.string()?,
            (_, w) => r.skip(w)?,
        }
    }
    Ok(n)
}

fn parse_attribute(mut r: Reader) -> Result<Attribute> {
    let mut name = String::new();
    let (mut f, mut i, mut s, mut t) = (None, None, None, None);
    let (mut floats, mut ints) = (Vec::new(), Vec::new());
    let mut kind = 0u64;
    while !r.done() {
        match r.key()? {
            (1, WIRE_LEN) => name = r.string()?,
            (2, WIRE_I32) => f = Some(f32::from_le_bytes(r.fixed()?)),
            (3, WIRE_VARINT) => i = Some(r.varint()? as i64),
            (4, WIRE_LEN) => s = Some(r.string()?),
            (5, WIRE_LEN) => t = Some(parse_tensor(r.bytes()?)?.1),
            (7, w) => r.push_f32s(w, &mut floats)?,
            (8, w) => r.push_i64s(w, &mut ints)?,
            (20, WIRE_VARINT) => kind = r.varint()?,
            (_, w) => r.skip(w)?,
        }
    }
    // AttributeType: FLOAT=1 INT=2 STRING=3 TENSOR=4 FLOATS=6 INTS=7
    let value = match kind {
        1 => AttrValue::Float(f.unwrap_or(0.0)),
        2 => AttrValue::Int(i.unwrap_or(0)),
        3 => AttrValue::String(s.unwrap_or_default()),
        4 => t.map_or(AttrValue::Other, AttrValue::Tensor),
        6 => AttrValue::Floats(floats),
        7 => AttrValue::Ints(ints),
        0 => match (f, i, s, t) {
            (Some(f), ..) => AttrValue::Float(f),
            (_, Some(i), ..) => AttrValue::Int(i),
            (_, _, Some(s), _) => AttrValue::String(s),
            (_, _, _, Some(t)) => AttrValue::Tensor(t),
            _ if !floats.is_empty() => AttrValue::Floats(floats),
            _ if !ints.is_empty() => AttrValue::Ints(ints),
            _ => AttrValue::Other,
        },
        _ => AttrValue::Other,
    };
    Ok(Attribute { name, value })
}

fn parse_value_info(mut r: Reader) -> Result<ValueInfo> {
    let mut v = ValueInfo::default();
    while !r.done() {
        match r.key()? {
            (1, WIRE_LEN) => v.name = r.string()?,
            (2, WIRE_LEN) => {
                let mut ty = r.bytes()?;
                while !ty.done() {
                    match ty.key()? {
                        (1, WIRE_LEN) => {
                            let mut tt = ty.bytes()?;
                            while !tt.done() {
                                match tt.key()? {
                                    (1, WIRE_VARINT) => v.elem_type = tt.varint()? as i32,
                                    (2, WIRE_LEN) => v.dims = Some(parse_shape(tt.bytes()?)?),
                                    (_, w) => tt.skip(w)?,
                                }
                            }
                        }
                        (_, w) => ty.skip(w)?,
                    }
                }
            }
            (_, w) => r.skip(w)?,
        }
    }
    Ok(v)
}

fn parse_shape(mut r: Reader) -> Result<Vec<Option<i64>>> {
    let mut dims = Vec::new();
    while !r.done() {
        match r.key()? {
            (1, WIRE_LEN) => {
                let mut d = r.bytes()?;
                let mut value = None;
                while !d.done() {
                    match d.key()? {
                        (1, WIRE_VARINT) => value = Some(d.varint()? as i64),
                        (_, w) => d.skip(w)?,
                    }
                }
                dims.push(value);
            }
            (_, w) => r.skip(w)?,
        }
    }
    Ok(dims)
}

// TensorProto.DataType
const FLOAT: i32 = 1;
const UINT8: i32 = 2;
const INT8: i32 = 3;
const INT32: i32 = 6;
const INT64: i32 = 7;
const BOOL: i32 = 9;
const DOUBLE: i32 = 11;

fn parse_tensor(mut r: Reader) -> Result<(String, Tensor)> {
    let start = r.base;
    let mut dims = Vec::new();
    let mut data_type = 0;
    let mut name = String::new();
    let (mut floats, mut ints, mut doubles) = (Vec::new(), Vec::new(), Vec::new());
    let mut raw: Option<&[u8]> = None;
    let mut external = false;
    while !r.done() {
        match r.key()? {
            (1, w) => r.push_i64s(w, &mut dims)?,
            (2, WIRE_VARINT) => data_type = r.varint()? as i32,
            (4, w) => r.push_f32s(w, &mut floats)?,
            (5, w) | (7, w) => r.push_i64s(w, &mut ints)?,
            (8, WIRE_LEN) => name = r.string()?,
            (9, WIRE_LEN) => raw = Some(r.bytes()?.buf),
            (10, w) => r.push_f64s(w, &mut doubles)?,
            (14, WIRE_VARINT) => external = r.varint()? == 1,
            (_, w) => r.skip(w)?,
        }
    }
    let fail = |message: String| Error::Parse { offset: start as u64, message };
    if external {
        return Err(fail(format!("tensor {name:?} uses external data, which is not supported")));
    }
    let shape: Vec<usize> = dims
        .iter()
        .map(|d| usize::try_from(*d).map_err(|_| fail(format!("tensor {name:?} has negative dim {d}"))))
        .collect::<Result<_>>()?;
    let count: usize = shape.iter().product();
    let data = match (data_type, raw) {
        (FLOAT, Some(b)) => Data::F32(b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
        (FLOAT, None) => Data::F32(floats),
        (DOUBLE, Some(b)) => Data::F32(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()) as f32).collect()),
        (DOUBLE, None) => Data::F32(doubles.into_iter().map(|v| v as f32).collect()),
        (INT64, Some(b)) => Data::I64(b.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect()),
        (INT32, Some(b)) => Data::I64(b.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap()) as i64).collect()),
        (INT8, Some(b)) => Data::I64(b.iter().map(|v| *v as i8 as i64).collect()),
        (UINT8, Some(b)) => Data::I64(b.iter().map(|v| *v as i64).collect()),
        (INT64 | INT32 | INT8 | UINT8, None) => Data::I64(ints),
        (BOOL, Some(b)) => Data::Bool(b.iter().map(|v| *v != 0).collect()),
        (BOOL, None) => Data::Bool(ints.into_iter().map(|v| v != 0).collect()),
        (other, _) => return Err(fail(format!("tensor {name:?} has unsupported data type {other}"))),
    };
    if data.len() != count {
        return Err(fail(format!("tensor {name:?} holds {} values for shape {shape:?}", data.len())));
    }
    Ok((name, Tensor::new(shape, data)))
}

#[cfg(test)]
pub(crate) mod encode {
    //! Minimal writer used by tests to build models in memory.

    pub fn varint(mut v: u64, out: &mut Vec<u8>) {
        loop {
            let byte = (v & 0x7f) as u8;
            v >>= 7;
            if v == 0 {
                out.push(byte);
                return;
            }
            out.push(byte | 0x80);
        }
    }

    pub fn field_bytes(field: u32, bytes: &[u8], out: &mut Vec<u8>) {
        varint(((field as u64) << 3) | 2, out);
        varint(bytes.len() as u64, out);
        out.extend_from_slice(bytes);
    }

    pub fn field_varint(field: u32, v: u64, out: &mut Vec<u8>) {
        varint((field as u64) << 3, out);
        varint(v, out);
    }

    pub fn field_f32(field: u32, v: f32, out: &mut Vec<u8>) {
        varint(((field as u64) << 3) | 5, out);
        out.extend_from_slice(&v.to_le_bytes());
    }

    pub fn tensor_f32(name: &str, dims: &[usize], values: &[f32]) -> Vec<u8> {
        let mut t = Vec::new();
        for d in dims {
            field_varint(1, *d as u64, &mut t);
        }
        field_varint(2, 1, &mut t);
        field_bytes(8, name.as_bytes(), &mut t);
        let raw: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        field_bytes(9, &raw, &mut t);
        t
    }

    pub fn value_info(name: &str, dims: &[Option<u64>]) -> Vec<u8> {
        let mut shape = Vec::new();
        for d in dims {
            let mut dim = Vec::new();
            match d {
                Some(v) => field_varint(1, *v, &mut dim),
                None => field_bytes(2, b"n", &mut dim),
            }
            field_bytes(1, &dim, &mut shape);
        }
        let mut tensor_type = Vec::new();
        field_varint(1, 1, &mut tensor_type);
        field_bytes(2, &shape, &mut tensor_type);
        let mut ty = Vec::new();
        field_bytes(1, &tensor_type, &mut ty);
        let mut v = Vec::new();
        field_bytes(1, name.as_bytes(), &mut v);
        field_bytes(2, &ty, &mut v);
        v
    }

    pub struct Node<'a> {
        pub op: &'a str,
        pub inputs: &'a [&'a str],
        pub outputs: &'a [&'a str],
        pub ints: &'a [(&'a str, &'a [i64])],
        pub int: &'a [(&'a str, i64)],
        pub float: &'a [(&'a str, f32)],
    }

    pub fn node(n: &Node) -> Vec<u8> {
        let mut out = Vec::new();
        for i in n.inputs {
            field_bytes(1, i.as_bytes(), &mut out);
        }
        for o in n.outputs {
            field_bytes(2, o.as_bytes(), &mut out);
        }
        field_bytes(4, n.op.as_bytes(), &mut out);
        for (name, values) in n.ints {
            let mut a = Vec::new();
            field_bytes(1, name.as_bytes(), &mut a);
            for v in *values {
                field_varint(8, *v as u64, &mut a);
            }
            field_varint(20, 7, &mut a);
            field_bytes(5, &a, &mut out);
        }
        for (name, v) in n.int {
            let mut a = Vec::new();
            field_bytes(1, name.as_bytes(), &mut a);
            field_varint(3, *v as u64, &mut a);
            field_varint(20, 2, &mut a);
            field_bytes(5, &a, &mut out);
        }
        for (name, v) in n.float {
            let mut a = Vec::new();
            field_bytes(1, name.as_bytes(), &mut a);
            field_f32(2, *v, &mut a);
            field_varint(20, 1, &mut a);
            field_bytes(5, &a, &mut out);
        }
        out
    }

    /// Model with opset 13, the given nodes and float initializers.
    pub fn model(
        nodes: &[Vec<u8>],
        initializers: &[Vec<u8>],
        inputs: &[Vec<u8>],
        outputs: &[Vec<u8>],
    ) -> Vec<u8> {
        let mut g = Vec::new();
        for n in nodes {
            field_bytes(1, n, &mut g);
        }
        field_bytes(2, b"test", &mut g);
        for t in initializers {
            field_bytes(5, t, &mut g);
        }
        for i in inputs {
            field_bytes(11, i, &mut g);
        }
        for o in outputs {
            field_bytes(12, o, &mut g);
        }
        let mut opset = Vec::new();
        field_varint(2, 13, &mut opset);
        let mut m = Vec::new();
        field_varint(1, 8, &mut m);
        field_bytes(7, &g, &mut m);
        field_bytes(8, &opset, &mut m);
        m
    }
}

#[cfg(test)]
mod tests {
    use super::encode::*;
    use super::*;

    #[test]
    fn varints_round_trip() {
        for v in [0u64, 1, 127, 128, 300, u32::MAX as u64, u64::MAX] {
            let mut buf = Vec::new();
            varint(v, &mut buf);
            assert_eq!(Reader::new(&buf, 0).varint().unwrap(), v);
        }
        // negative int64 values use ten-byte two's complement
        let mut buf = Vec::new();
        varint(-3i64 as u64, &mut buf);
        assert_eq!(buf.len(), 10);
        assert_eq!(Reader::new(&buf, 0).varint().unwrap() as i64, -3);
    }

    #[test]
    fn parses_graph_structure() {
        let relu = node(&Node { op: "Relu", inputs: &["x"], outputs: &["y"], ints: &[], int: &[], float: &[] });
        let bytes = model(
            &[relu],
            &[tensor_f32("w", &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])],
            &[value_info("x", &[None, Some(3)])],
            &[value_info("y", &[None, Some(3)])],
        );
        let m = parse_model(&bytes).unwrap();
        assert_eq!(m.opsets, vec![(String::new(), 13)]);
        assert_eq!(m.graph.nodes[0].op_type, "Relu");
        assert_eq!(m.graph.inputs[0].dims, Some(vec![None, Some(3)]));
        let (name, w) = &m.graph.initializers[0];
        assert_eq!(name, "w");
        assert_eq!(w.shape(), &[2, 3]);
        assert_eq!(w.f32s().unwrap()[5], 6.0);
    }

    #[test]
    fn truncation_reports_offset() {
        let relu = node(&Node { op: "Relu", inputs: &["x"], outputs: &["y"], ints: &[], int: &[], float: &[] });
        let bytes = model(&[relu], &[], &[value_info("x", &[Some(1)])], &[value_info("y", &[Some(1)])]);
        let err = parse_model(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Parse { offset, .. } if offset > 0), "{err}");
        assert!(parse_model(b"").is_err());
    }
}
