//! Operator kernels. Every supported operator produces exactly one output.

use crate::error::{Error, Result};

use super::proto::{AttrValue, Attribute, NodeProto};
use super::tensor::{
    axis, broadcast_shape, broadcast_zip, concat, expand_offsets, strides, Data, Tensor,
};

pub(crate) const SUPPORTED_OPS: &[&str] = &[
    "Abs", "Add", "AveragePool", "BatchNormalization", "Cast", "Clip", "Concat", "Constant",
    "ConstantOfShape", "Conv", "Div", "Dropout", "Equal", "Erf", "Exp", "Expand", "Flatten",
    "Gather", "Gemm", "GlobalAveragePool", "Greater", "Identity", "LayerNormalization", "Less",
    "Log", "MatMul", "MaxPool", "Mod", "Mul", "Neg", "Pow", "Reciprocal", "ReduceMean", "Relu",
    "Reshape", "Shape", "Sigmoid", "Slice", "Softmax", "Sqrt", "Squeeze", "Sub", "Tanh",
    "Transpose", "Unsqueeze", "Where",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Unary {
    Abs,
    Erf,
    Exp,
    Log,
    Neg,
    Reciprocal,
    Relu,
    Sigmoid,
    Sqrt,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Mod { fmod: bool },
    Equal,
    Less,
    Greater,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum AutoPad {
    NotSet,
    Valid,
    SameUpper,
    SameLower,
}

/// Spatial window parameters shared by convolution and pooling (2-D only).
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Window {
    kernel: Option<[usize; 2]>,
    strides: [usize; 2],
    dilations: [usize; 2],
    /// `[top, left, bottom, right]`
    pads: [usize; 4],
    auto_pad: AutoPad,
    ceil_mode: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum PoolKind {
    Max,
    Average { count_include_pad: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Op {
    Identity,
    Unary(Unary),
    Binary(Binary),
    Clip { min: Option<f32>, max: Option<f32> },
    Conv { window: Window, group: usize },
    Pool { window: Window, kind: PoolKind },
    GlobalAveragePool,
    BatchNorm { epsilon: f32 },
    LayerNorm { axis: i64, epsilon: f32 },
    Gemm { alpha: f32, beta: f32, trans_a: bool, trans_b: bool },
    MatMul,
    Flatten { axis: i64 },
    Reshape { allowzero: bool },
    Transpose { perm: Option<Vec<i64>> },
    Concat { axis: i64 },
    Gather { axis: i64 },
    Unsqueeze { axes: Option<Vec<i64>> },
    Squeeze { axes: Option<Vec<i64>> },
    Slice { attrs: Option<(Vec<i64>, Vec<i64>, Option<Vec<i64>>)> },
    Shape { start: i64, end: Option<i64> },
    Cast { to: i32 },
    Constant(Tensor),
    ConstantOfShape(Tensor),
    Expand,
    Where,
    ReduceMean { axes: Option<Vec<i64>>, keepdims: bool, noop_with_empty_axes: bool },
    Softmax { axis: i64, coerce_2d: bool },
}

struct Attrs<'a> {
    node: &'a NodeProto,
}

impl<'a> Attrs<'a> {
    fn get(&self, name: &str) -> Option<&'a AttrValue> {
        self.node.attributes.iter().find(|a: &&Attribute| a.name == name).map(|a| &a.value)
    }

    fn bad(&self, name: &str) -> Error {
        Error::Model(format!("{} node '{}': attribute {name} has the wrong type", self.node.op_type, self.node.name))
    }

    fn int(&self, name: &str, default: i64) -> Result<i64> {
        match self.get(name) {
            None => Ok(default),
            Some(AttrValue::Int(v)) => Ok(*v),
            Some(_) => Err(self.bad(name)),
        }
    }

    fn float(&self, name: &str, default: f32) -> Result<f32> {
        match self.get(name) {
            None => Ok(default),
            Some(AttrValue::Float(v)) => Ok(*v),
            Some(_) => Err(self.bad(name)),
        }
    }

    fn opt_float(&self, name: &str) -> Result<Option<f32>> {
        self.get(name).map(|_| self.float(name, 0.0)).transpose()
    }

    fn ints(&self, name: &str) -> Result<Option<Vec<i64>>> {
        match self.get(name) {
            None => Ok(None),
            Some(AttrValue::Ints(v)) => Ok(Some(v.clone())),
            Some(AttrValue::Int(v)) => Ok(Some(vec![*v])),
            Some(_) => Err(self.bad(name)),
        }
    }

    fn string(&self, name: &str) -> Result<Option<&'a str>> {
        match self.get(name) {
            None => Ok(None),
            Some(AttrValue::String(v)) => Ok(Some(v)),
            Some(_) => Err(self.bad(name)),
        }
    }

    fn tensor(&self, name: &str) -> Result<Option<&'a Tensor>> {
        match self.get(name) {
            None => Ok(None),
            Some(AttrValue::Tensor(t)) => Ok(Some(t)),
            Some(_) => Err(self.bad(name)),
        }
    }

    fn pair(&self, name: &str, default: usize) -> Result<[usize; 2]> {
        match self.ints(name)? {
            None => Ok([default; 2]),
            Some(v) if v.len() == 2 && v.iter().all(|x| *x >= 1) => Ok([v[0] as usize, v[1] as usize]),
            Some(v) => Err(Error::Model(format!(
                "{} node '{}': {name} {v:?} is not a pair of positive values (only 2-D windows are supported)",
                self.node.op_type, self.node.name
            ))),
        }
    }

    fn window(&self) -> Result<Window> {
        let pads = match self.ints("pads")? {
            None => [0; 4],
            Some(v) if v.len() == 4 && v.iter().all(|x| *x >= 0) => [v[0] as usize, v[1] as usize, v[2] as usize, v[3] as usize],
            Some(v) => return Err(Error::Model(format!("{} node '{}': unsupported pads {v:?}", self.node.op_type, self.node.name))),
        };
        let auto_pad = match self.string("auto_pad")?.unwrap_or("NOTSET") {
            "NOTSET" => AutoPad::NotSet,
            "VALID" => AutoPad::Valid,
            "SAME_UPPER" => AutoPad::SameUpper,
            "SAME_LOWER" => AutoPad::SameLower,
            other => return Err(Error::Model(format!("unknown auto_pad {other}"))),
        };
        Ok(Window {
            kernel: self.ints("kernel_shape")?.map(|_| self.pair("kernel_shape", 1)).transpose()?,
            strides: self.pair("strides", 1)?,
            dilations: self.pair("dilations", 1)?,
            pads,
            auto_pad,
            ceil_mode: self.int("ceil_mode", 0)? != 0,
        })
    }
}

impl Op {
    /// Builds the operator for `node`; `opset` is the default-domain version.
    pub fn parse(node: &NodeProto, opset: i64) -> Result<Op> {
        let a = Attrs { node };
        let op = match node.op_type.as_str() {
            "Identity" | "Dropout" => Op::Identity,
            "Abs" => Op::Unary(Unary::Abs),
            "Erf" => Op::Unary(Unary::Erf),
            "Exp" => Op::Unary(Unary::Exp),
            "Log" => Op::Unary(Unary::Log),
            "Neg" => Op::Unary(Unary::Neg),
            "Reciprocal" => Op::Unary(Unary::Reciprocal),
            "Relu" => Op::Unary(Unary::Relu),
            "Sigmoid" => Op::Unary(Unary::Sigmoid),
            "Sqrt" => Op::Unary(Unary::Sqrt),
            "Tanh" => Op::Unary(Unary::Tanh),
            "Add" => Op::Binary(Binary::Add),
            "Sub" => Op::Binary(Binary::Sub),
            "Mul" => Op::Binary(Binary::Mul),
            "Div" => Op::Binary(Binary::Div),
            "Pow" => Op::Binary(Binary::Pow),
            "Mod" => Op::Binary(Binary::Mod { fmod: a.int("fmod", 0)? != 0 }),
            "Equal" => Op::Binary(Binary::Equal),
            "Less" => Op::Binary(Binary::Less),
            "Greater" => Op::Binary(Binary::Greater),
            "Clip" => Op::Clip { min: a.opt_float("min")?, max: a.opt_float("max")? },
            "Conv" => {
                let group = a.int("group", 1)?;
                if group < 1 {
                    return Err(Error::Model(format!("Conv node '{}': group {group}", node.name)));
                }
                Op::Conv { window: a.window()?, group: group as usize }
            }
            "MaxPool" | "AveragePool" => {
                let window = a.window()?;
                if window.kernel.is_none() {
                    return Err(Error::Model(format!("{} node '{}' has no kernel_shape", node.op_type, node.name)));
                }
                if node.op_type == "AveragePool" && window.dilations != [1, 1] {
                    return Err(Error::Model(format!("AveragePool node '{}': dilations are not supported", node.name)));
                }
                let kind = if node.op_type == "MaxPool" {
                    if a.int("storage_order", 0)? != 0 {
                        return Err(Error::Model(format!("MaxPool node '{}': storage_order is not supported", node.name)));
                    }
                    PoolKind::Max
                } else {
                    PoolKind::Average { count_include_pad: a.int("count_include_pad", 0)? != 0 }
                };
                Op::Pool { window, kind }
            }
            "GlobalAveragePool" => Op::GlobalAveragePool,
            "BatchNormalization" => {
                if a.int("training_mode", 0)? != 0 {
                    return Err(Error::Model(format!("BatchNormalization node '{}' is in training mode", node.name)));
                }
                Op::BatchNorm { epsilon: a.float("epsilon", 1e-5)? }
            }
            "LayerNormalization" => {
                if a.int("stash_type", 1)? != 1 {
                    return Err(Error::Model(format!("LayerNormalization node '{}': unsupported stash_type", node.name)));
                }
                Op::LayerNorm { axis: a.int("axis", -1)?, epsilon: a.float("epsilon", 1e-5)? }
            }
            "Gemm" => Op::Gemm {
                alpha: a.float("alpha", 1.0)?,
                beta: a.float("beta", 1.0)?,
                trans_a: a.int("transA", 0)? != 0,
                trans_b: a.int("transB", 0)? != 0,
            },
            "MatMul" => Op::MatMul,
            "Flatten" => Op::Flatten { axis: a.int("axis", 1)? },
            "Reshape" => Op::Reshape { allowzero: a.int("allowzero", 0)? != 0 },
            "Transpose" => Op::Transpose { perm: a.ints("perm")? },
            "Concat" => match a.get("axis") {
                Some(_) => Op::Concat { axis: a.int("axis", 0)? },
                None => return Err(Error::Model(format!("Concat node '{}' has no axis", node.name))),
            },
            "Gather" => Op::Gather { axis: a.int("axis", 0)? },
            "Unsqueeze" => Op::Unsqueeze { axes: a.ints("axes")? },
            "Squeeze" => Op::Squeeze { axes: a.ints("axes")? },
            "Slice" => {
                let attrs = match (a.ints("starts")?, a.ints("ends")?) {
                    (Some(s), Some(e)) => Some((s, e, a.ints("axes")?)),
                    _ => None,
                };
                Op::Slice { attrs }
            }
            "Shape" => Op::Shape { start: a.int("start", 0)?, end: a.get("end").map(|_| a.int("end", 0)).transpose()? },
            "Cast" => Op::Cast { to: a.int("to", 0)? as i32 },
            "Constant" => Op::Constant(constant_value(&a)?),
            "ConstantOfShape" => {
                let value = a.tensor("value")?.cloned().unwrap_or_else(|| Tensor::f32(vec![1], vec![0.0]));
                if value.len() != 1 {
                    return Err(Error::Model(format!("ConstantOfShape node '{}': value must hold one element", node.name)));
                }
                Op::ConstantOfShape(value)
            }
            "Expand" => Op::Expand,
            "Where" => Op::Where,
            "ReduceMean" => Op::ReduceMean {
                axes: a.ints("axes")?,
                keepdims: a.int("keepdims", 1)? != 0,
                noop_with_empty_axes: a.int("noop_with_empty_axes", 0)? != 0,
            },
            "Softmax" => {
                let legacy = opset < 13;
                Op::Softmax { axis: a.int("axis", if legacy { 1 } else { -1 })?, coerce_2d: legacy }
            }
            other => return Err(Error::Model(format!("unsupported operator {other}"))),
        };
        Ok(op)
    }

    pub fn eval(&self, inputs: &[Option<&Tensor>]) -> Result<Tensor> {
        let input = |i: usize| -> Result<&Tensor> {
            inputs
                .get(i)
                .copied()
                .flatten()
                .ok_or_else(|| Error::Model(format!("missing input {i}")))
        };
        let optional = |i: usize| inputs.get(i).copied().flatten();
        match self {
            Op::Identity => Ok(input(0)?.clone()),
            Op::Unary(u) => unary(*u, input(0)?),
            Op::Binary(b) => binary(*b, input(0)?, input(1)?),
            Op::Clip { min, max } => {
                let bound = |i: usize, attr: Option<f32>| -> Result<Option<f32>> {
                    match optional(i) {
                        Some(t) => scalar_f32(t).map(Some),
                        None => Ok(attr),
                    }
                };
                let (lo, hi) = (bound(1, *min)?, bound(2, *max)?);
                let x = input(0)?;
                let (lo, hi) = (lo.unwrap_or(f32::NEG_INFINITY), hi.unwrap_or(f32::INFINITY));
                Ok(Tensor::f32(x.shape().to_vec(), x.f32s()?.iter().map(|v| v.max(lo).min(hi)).collect()))
            }
            Op::Conv { window, group } => conv(input(0)?, input(1)?, optional(2), window, *group),
            Op::Pool { window, kind } => pool(input(0)?, window, *kind),
            Op::GlobalAveragePool => global_average_pool(input(0)?),
            Op::BatchNorm { epsilon } => batch_norm(input(0)?, input(1)?, input(2)?, input(3)?, input(4)?, *epsilon),
            Op::LayerNorm { axis, epsilon } => layer_norm(input(0)?, input(1)?, optional(2), *axis, *epsilon),
            Op::Gemm { alpha, beta, trans_a, trans_b } => {
                gemm(input(0)?, input(1)?, optional(2), *alpha, *beta, *trans_a, *trans_b)
            }
            Op::MatMul => matmul(input(0)?, input(1)?),
            Op::Flatten { axis: ax } => {
                let x = input(0)?;
                let k = axis(*ax, x.rank(), true)?;
                let outer = x.shape()[..k].iter().product();
                x.reshaped(vec![outer, x.len() / outer.max(1)])
            }
            Op::Reshape { allowzero } => reshape(input(0)?, input(1)?.i64s()?, *allowzero),
            Op::Transpose { perm } => transpose(input(0)?, perm.as_deref()),
            Op::Concat { axis } => {
                let parts: Vec<&Tensor> = inputs.iter().map(|t| t.ok_or_else(|| Error::Model("missing Concat input".into()))).collect::<Result<_>>()?;
                concat(&parts, *axis)
            }
            Op::Gather { axis } => gather(input(0)?, input(1)?, *axis),
            Op::Unsqueeze { axes } => {
                let x = input(0)?;
                let axes = match (axes, optional(1)) {
                    (Some(a), _) => a.clone(),
                    (None, Some(t)) => t.i64s()?.to_vec(),
                    (None, None) => return Err(Error::Model("Unsqueeze without axes".into())),
                };
                let rank = x.rank() + axes.len();
                let mut marks = vec![false; rank];
                for a in &axes {
                    let k = axis(*a, rank, false)?;
                    if std::mem::replace(&mut marks[k], true) {
                        return Err(Error::Model(format!("Unsqueeze repeats axis {a}")));
                    }
                }
                let mut dims = x.shape().iter();
                let shape = marks.iter().map(|m| if *m { 1 } else { *dims.next().unwrap() }).collect();
                x.reshaped(shape)
            }
            Op::Squeeze { axes } => {
                let x = input(0)?;
                let axes = match (axes, optional(1)) {
                    (Some(a), _) => Some(a.clone()),
                    (None, Some(t)) => Some(t.i64s()?.to_vec()),
                    (None, None) => None,
                };
                let drop: Vec<usize> = match axes {
                    Some(list) => list.iter().map(|a| axis(*a, x.rank(), false)).collect::<Result<_>>()?,
                    None => (0..x.rank()).filter(|d| x.shape()[*d] == 1).collect(),
                };
                if let Some(d) = drop.iter().find(|d| x.shape()[**d] != 1) {
                    return Err(Error::Model(format!("Squeeze axis {d} of {:?} is not 1", x.shape())));
                }
                let shape = (0..x.rank()).filter(|d| !drop.contains(d)).map(|d| x.shape()[d]).collect();
                x.reshaped(shape)
            }
            Op::Slice { attrs } => {
                let x = input(0)?;
                match attrs {
                    Some((s, e, a)) => slice(x, s, e, a.as_deref(), None),
                    None => {
                        let axes = optional(3).map(|t| t.i64s()).transpose()?;
                        let steps = optional(4).map(|t| t.i64s()).transpose()?;
                        slice(x, input(1)?.i64s()?, input(2)?.i64s()?, axes, steps)
                    }
                }
            }
            Op::Shape { start, end } => {
                let dims = input(0)?.shape();
                let r = dims.len() as i64;
                let clampi = |v: i64| (if v < 0 { v + r } else { v }).clamp(0, r) as usize;
                let (s, e) = (clampi(*start), clampi(end.unwrap_or(r)));
                let v: Vec<i64> = dims[s..e.max(s)].iter().map(|d| *d as i64).collect();
                Ok(Tensor::i64(vec![v.len()], v))
            }
            Op::Cast { to } => cast(input(0)?, *to),
            Op::Constant(t) => Ok(t.clone()),
            Op::ConstantOfShape(value) => {
                let shape = dims_from(input(0)?.i64s()?)?;
                let n = shape.iter().product();
                let data = match value.data() {
                    Data::F32(v) => Data::F32(vec![v[0]; n]),
                    Data::I64(v) => Data::I64(vec![v[0]; n]),
                    Data::Bool(v) => Data::Bool(vec![v[0]; n]),
                };
                Ok(Tensor::new(shape, data))
            }
            Op::Expand => {
                let x = input(0)?;
                let target = dims_from(input(1)?.i64s()?)?;
                let out = broadcast_shape(x.shape(), &target)?;
                Ok(x.gather(out.clone(), &expand_offsets(x.shape(), &out)))
            }
            Op::Where => where_select(input(0)?, input(1)?, input(2)?),
            Op::ReduceMean { axes, keepdims, noop_with_empty_axes } => {
                let x = input(0)?;
                let axes = match (axes, optional(1)) {
                    (Some(a), _) => a.clone(),
                    (None, Some(t)) => t.i64s()?.to_vec(),
                    (None, None) => Vec::new(),
                };
                if axes.is_empty() && *noop_with_empty_axes {
                    return Ok(x.clone());
                }
                reduce_mean(x, &axes, *keepdims)
            }
            Op::Softmax { axis, coerce_2d } => softmax(input(0)?, *axis, *coerce_2d),
        }
    }
}

fn constant_value(a: &Attrs) -> Result<Tensor> {
    if let Some(t) = a.tensor("value")? {
        return Ok(t.clone());
    }
    match (a.get("value_float"), a.get("value_floats"), a.get("value_int"), a.get("value_ints")) {
        (Some(AttrValue::Float(v)), ..) => Ok(Tensor::f32(vec![], vec![*v])),
        (_, Some(AttrValue::Floats(v)), ..) => Ok(Tensor::f32(vec![v.len()], v.clone())),
        (_, _, Some(AttrValue::Int(v)), _) => Ok(Tensor::i64(vec![], vec![*v])),
        (_, _, _, Some(AttrValue::Ints(v))) => Ok(Tensor::i64(vec![v.len()], v.clone())),
        _ => Err(Error::Model(format!("Constant node '{}' has no supported value", a.node.name))),
    }
}

fn scalar_f32(t: &Tensor) -> Result<f32> {
    match t.f32s()? {
        [v] => Ok(*v),
        v => Err(Error::Model(format!("expected a scalar, got {} values", v.len()))),
    }
}

fn dims_from(v: &[i64]) -> Result<Vec<usize>> {
    v.iter()
        .map(|d| usize::try_from(*d).map_err(|_| Error::Model(format!("negative dimension {d}"))))
        .collect()
}

fn unary(op: Unary, x: &Tensor) -> Result<Tensor> {
    if let (Unary::Neg | Unary::Abs, Data::I64(v)) = (op, x.data()) {
        let f = if op == Unary::Neg { |a: i64| -a } else { |a: i64| a.abs() };
        return Ok(Tensor::i64(x.shape().to_vec(), v.iter().map(|a| f(*a)).collect()));
    }
    let f: fn(f32) -> f32 = match op {
        Unary::Abs => f32::abs,
        Unary::Erf => libm::erff,
        Unary::Exp => f32::exp,
        Unary::Log => f32::ln,
        Unary::Neg => |v| -v,
        Unary::Reciprocal => f32::recip,
        Unary::Relu => |v| v.max(0.0),
        Unary::Sigmoid => |v| 1.0 / (1.0 + (-v).exp()),
        Unary::Sqrt => f32::sqrt,
        Unary::Tanh => f32::tanh,
    };
    Ok(Tensor::f32(x.shape().to_vec(), x.f32s()?.iter().map(|v| f(*v)).collect()))
}

fn binary(op: Binary, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    let mismatch = || Error::Model(format!("{op:?} on {} and {}", a.data().type_name(), b.data().type_name()));
    let (shape, data) = match (op, a.data(), b.data()) {
        (Binary::Equal, Data::F32(x), Data::F32(y)) => bools(broadcast_zip(x, sa, y, sb, |p, q| p == q)?),
        (Binary::Equal, Data::I64(x), Data::I64(y)) => bools(broadcast_zip(x, sa, y, sb, |p, q| p == q)?),
        (Binary::Equal, Data::Bool(x), Data::Bool(y)) => bools(broadcast_zip(x, sa, y, sb, |p, q| p == q)?),
        (Binary::Less, Data::F32(x), Data::F32(y)) => bools(broadcast_zip(x, sa, y, sb, |p, q| p < q)?),
        (Binary::Less, Data::I64(x), Data::I64(y)) => bools(broadcast_zip(x, sa, y, sb, |p, q| p < q)?),
        (Binary::Greater, Data::F32(x), Data::F32(y)) => bools(broadcast_zip(x, sa, y, sb, |p, q| p > q)?),
        (Binary::Greater, Data::I64(x), Data::I64(y)) => bools(broadcast_zip(x, sa, y, sb, |p, q| p > q)?),
        (Binary::Pow, Data::F32(x), Data::I64(y)) => {
            let (s, v) = broadcast_zip(x, sa, y, sb, |p, q| p.powi(q as i32))?;
            (s, Data::F32(v))
        }
        (_, Data::F32(x), Data::F32(y)) => {
            let f: fn(f32, f32) -> f32 = match op {
                Binary::Add => |p, q| p + q,
                Binary::Sub => |p, q| p - q,
                Binary::Mul => |p, q| p * q,
                Binary::Div => |p, q| p / q,
                Binary::Pow => f32::powf,
                Binary::Mod { fmod: true } => |p, q| p % q,
                _ => return Err(mismatch()),
            };
            let (s, v) = broadcast_zip(x, sa, y, sb, f)?;
            (s, Data::F32(v))
        }
        (_, Data::I64(x), Data::I64(y)) => {
            if matches!(op, Binary::Div | Binary::Mod { .. }) && y.contains(&0) {
                return Err(Error::Model(format!("integer {op:?} by zero")));
            }
            let f: fn(i64, i64) -> i64 = match op {
                Binary::Add => |p, q| p.wrapping_add(q),
                Binary::Sub => |p, q| p.wrapping_sub(q),
                Binary::Mul => |p, q| p.wrapping_mul(q),
                Binary::Div => |p, q| p / q,
                Binary::Mod { fmod: true } => |p, q| p % q,
                Binary::Mod { fmod: false } => |p, q| ((p % q) + q) % q,
                Binary::Pow => |p, q| if q < 0 { 0 } else { p.wrapping_pow(q as u32) },
                _ => return Err(mismatch()),
            };
            let (s, v) = broadcast_zip(x, sa, y, sb, f)?;
            (s, Data::I64(v))
        }
        _ => return Err(mismatch()),
    };
    Ok(Tensor::new(shape, data))
}

fn bools((shape, v): (Vec<usize>, Vec<bool>)) -> (Vec<usize>, Data) {
    (shape, Data::Bool(v))
}

fn cast(x: &Tensor, to: i32) -> Result<Tensor> {
    const FLOAT: i32 = 1;
    const DOUBLE: i32 = 11;
    const BOOL: i32 = 9;
    let shape = x.shape().to_vec();
    let data = match (to, x.data()) {
        (FLOAT | DOUBLE, Data::F32(v)) => Data::F32(v.clone()),
        (FLOAT | DOUBLE, Data::I64(v)) => Data::F32(v.iter().map(|a| *a as f32).collect()),
        (FLOAT | DOUBLE, Data::Bool(v)) => Data::F32(v.iter().map(|a| f32::from(u8::from(*a))).collect()),
        (2 | 3 | 6 | 7, Data::F32(v)) => Data::I64(v.iter().map(|a| *a as i64).collect()),
        (2 | 3 | 6 | 7, Data::I64(v)) => Data::I64(v.clone()),
        (2 | 3 | 6 | 7, Data::Bool(v)) => Data::I64(v.iter().map(|a| i64::from(*a)).collect()),
        (BOOL, Data::F32(v)) => Data::Bool(v.iter().map(|a| *a != 0.0).collect()),
        (BOOL, Data::I64(v)) => Data::Bool(v.iter().map(|a| *a != 0).collect()),
        (BOOL, Data::Bool(v)) => Data::Bool(v.clone()),
        (other, _) => return Err(Error::Model(format!("Cast to element type {other} is not supported"))),
    };
    Ok(Tensor::new(shape, data))
}

/// Offsets of the Cartesian product of per-axis index lists.
fn grid_offsets(strides: &[usize], axes: &[Vec<usize>]) -> Vec<usize> {
    let mut offsets = vec![0usize];
    for (s, idx) in strides.iter().zip(axes) {
        offsets = offsets.iter().flat_map(|&o| idx.iter().map(move |&i| o + i * s)).collect();
    }
    offsets
}

fn transpose(x: &Tensor, perm: Option<&[i64]>) -> Result<Tensor> {
    let rank = x.rank();
    let perm: Vec<usize> = match perm {
        Some(p) => p.iter().map(|a| axis(*a, rank, false)).collect::<Result<_>>()?,
        None => (0..rank).rev().collect(),
    };
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|p| std::mem::replace(&mut seen[*p], true)) {
        return Err(Error::Model(format!("invalid permutation {perm:?} for rank {rank}")));
    }
    let own = strides(x.shape());
    let shape: Vec<usize> = perm.iter().map(|p| x.shape()[*p]).collect();
    let s: Vec<usize> = perm.iter().map(|p| own[*p]).collect();
    let ranges: Vec<Vec<usize>> = shape.iter().map(|d| (0..*d).collect()).collect();
    Ok(x.gather(shape, &grid_offsets(&s, &ranges)))
}

fn slice(x: &Tensor, starts: &[i64], ends: &[i64], axes: Option<&[i64]>, steps: Option<&[i64]>) -> Result<Tensor> {
    let rank = x.rank();
    let default_axes: Vec<i64> = (0..starts.len() as i64).collect();
    let axes = axes.unwrap_or(&default_axes);
    if ends.len() != starts.len() || axes.len() != starts.len() || steps.is_some_and(|s| s.len() != starts.len()) {
        return Err(Error::Model("Slice starts, ends, axes and steps differ in length".into()));
    }
    let mut ranges: Vec<Vec<usize>> = x.shape().iter().map(|d| (0..*d).collect()).collect();
    for (k, a) in axes.iter().enumerate() {
        let ax = axis(*a, rank, false)?;
        let dim = x.shape()[ax] as i64;
        let step = steps.map_or(1, |s| s[k]);
        if step == 0 {
            return Err(Error::Model("Slice step is zero".into()));
        }
        let wrap = |v: i64| if v < 0 { v.saturating_add(dim) } else { v };
        let (s, e) = (wrap(starts[k]), wrap(ends[k]));
        let idx: Vec<usize> = if step > 0 {
            let (s, e) = (s.clamp(0, dim), e.clamp(0, dim));
            (s..e).step_by(step as usize).map(|i| i as usize).collect()
        } else {
            let (s, e) = (s.clamp(0, dim - 1), e.clamp(-1, dim - 1));
            let mut v = Vec::new();
            let mut i = s;
            while i > e {
                v.push(i as usize);
                i += step;
            }
            v
        };
        ranges[ax] = idx;
    }
    let shape = ranges.iter().map(Vec::len).collect();
    Ok(x.gather(shape, &grid_offsets(&strides(x.shape()), &ranges)))
}

fn gather(x: &Tensor, indices: &Tensor, ax: i64) -> Result<Tensor> {
    let ax = axis(ax, x.rank(), false)?;
    let dim = x.shape()[ax];
    let idx: Vec<usize> = indices
        .i64s()?
        .iter()
        .map(|i| {
            let j = if *i < 0 { *i + dim as i64 } else { *i };
            usize::try_from(j).ok().filter(|j| *j < dim).ok_or_else(|| Error::Model(format!("Gather index {i} out of range for {dim}")))
        })
        .collect::<Result<_>>()?;
    let mut ranges: Vec<Vec<usize>> = x.shape().iter().map(|d| (0..*d).collect()).collect();
    ranges[ax] = idx;
    let offsets = grid_offsets(&strides(x.shape()), &ranges);
    let mut shape = x.shape()[..ax].to_vec();
    shape.extend_from_slice(indices.shape());
    shape.extend_from_slice(&x.shape()[ax + 1..]);
    Ok(x.gather(shape, &offsets))
}

fn reshape(x: &Tensor, target: &[i64], allowzero: bool) -> Result<Tensor> {
    let mut shape = Vec::with_capacity(target.len());
    let mut infer = None;
    for (i, d) in target.iter().enumerate() {
        match *d {
            -1 if infer.is_none() => {
                infer = Some(i);
                shape.push(1);
            }
            0 if !allowzero => shape.push(*x.shape().get(i).ok_or_else(|| Error::Model(format!("Reshape copies missing axis {i}")))?),
            d if d >= 0 => shape.push(d as usize),
            _ => return Err(Error::Model(format!("invalid Reshape target {target:?}"))),
        }
    }
    if let Some(i) = infer {
        let known: usize = shape.iter().product();
        if known == 0 || !x.len().is_multiple_of(known) {
            return Err(Error::Model(format!("cannot reshape {:?} to {target:?}", x.shape())));
        }
        shape[i] = x.len() / known;
    }
    x.reshaped(shape)
}

fn where_select(cond: &Tensor, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let out = broadcast_shape(cond.shape(), &broadcast_shape(x.shape(), y.shape())?)?;
    let c = cond.gather(out.clone(), &expand_offsets(cond.shape(), &out));
    let a = x.gather(out.clone(), &expand_offsets(x.shape(), &out));
    let b = y.gather(out.clone(), &expand_offsets(y.shape(), &out));
    let c = c.bools()?;
    fn pick<T: Copy>(c: &[bool], a: &[T], b: &[T]) -> Vec<T> {
        c.iter().zip(a.iter().zip(b)).map(|(c, (a, b))| if *c { *a } else { *b }).collect()
    }
    let data = match (a.data(), b.data()) {
        (Data::F32(p), Data::F32(q)) => Data::F32(pick(c, p, q)),
        (Data::I64(p), Data::I64(q)) => Data::I64(pick(c, p, q)),
        (Data::Bool(p), Data::Bool(q)) => Data::Bool(pick(c, p, q)),
        (p, q) => return Err(Error::Model(format!("Where on {} and {}", p.type_name(), q.type_name()))),
    };
    Ok(Tensor::new(out, data))
}

fn reduce_mean(x: &Tensor, axes: &[i64], keepdims: bool) -> Result<Tensor> {
    let rank = x.rank();
    let mut reduced = vec![axes.is_empty(); rank];
    for a in axes {
        reduced[axis(*a, rank, false)?] = true;
    }
    let kept: Vec<usize> = (0..rank).map(|d| if reduced[d] { 1 } else { x.shape()[d] }).collect();
    let out_strides = strides(&kept);
    let s: Vec<usize> = (0..rank).map(|d| if reduced[d] { 0 } else { out_strides[d] }).collect();
    let mut sums = vec![0f64; kept.iter().product()];
    let v = x.f32s()?;
    let mut i = 0;
    super::tensor::for_each_offset(x.shape(), [&s], |[o]| {
        sums[o] += f64::from(v[i]);
        i += 1;
    });
    let count = (x.len() / sums.len().max(1)).max(1) as f64;
    let shape = if keepdims { kept } else { (0..rank).filter(|d| !reduced[*d]).map(|d| x.shape()[d]).collect() };
    Ok(Tensor::f32(shape, sums.into_iter().map(|s| (s / count) as f32).collect()))
}

fn softmax(x: &Tensor, ax: i64, coerce_2d: bool) -> Result<Tensor> {
    let k = axis(ax, x.rank(), false)?;
    let outer: usize = x.shape()[..k].iter().product();
    let (dim, inner) = if coerce_2d {
        (x.len() / outer.max(1), 1)
    } else {
        (x.shape()[k], x.shape()[k + 1..].iter().product())
    };
    let mut v = x.f32s()?.to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * dim * inner + j * inner + i;
            let max = (0..dim).map(|j| v[at(j)]).fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0;
            for j in 0..dim {
                let e = (v[at(j)] - max).exp();
                v[at(j)] = e;
                sum += e;
            }
            for j in 0..dim {
                v[at(j)] /= sum;
            }
        }
    }
    Ok(Tensor::f32(x.shape().to_vec(), v))
}

fn batch_norm(x: &Tensor, scale: &Tensor, bias: &Tensor, mean: &Tensor, var: &Tensor, eps: f32) -> Result<Tensor> {
    if x.rank() < 2 {
        return Err(Error::Model(format!("BatchNormalization input of rank {}", x.rank())));
    }
    let c = x.shape()[1];
    let inner: usize = x.shape()[2..].iter().product();
    let (scale, bias, mean, var) = (scale.f32s()?, bias.f32s()?, mean.f32s()?, var.f32s()?);
    if [scale.len(), bias.len(), mean.len(), var.len()].iter().any(|n| *n != c) {
        return Err(Error::Model(format!("BatchNormalization parameters do not match {c} channels")));
    }
    let mut v = x.f32s()?.to_vec();
    for (chunk_idx, chunk) in v.chunks_mut(inner.max(1)).enumerate() {
        let ch = chunk_idx % c;
        let g = scale[ch] / (var[ch] + eps).sqrt();
        let b = bias[ch] - mean[ch] * g;
        chunk.iter_mut().for_each(|e| *e = *e * g + b);
    }
    Ok(Tensor::f32(x.shape().to_vec(), v))
}

fn layer_norm(x: &Tensor, scale: &Tensor, bias: Option<&Tensor>, ax: i64, eps: f32) -> Result<Tensor> {
    let k = axis(ax, x.rank(), false)?;
    let norm_shape = &x.shape()[k..];
    let inner: usize = norm_shape.iter().product();
    let expand = |t: &Tensor| -> Result<Vec<f32>> {
        let f = t.f32s()?;
        broadcast_shape(t.shape(), norm_shape)?;
        Ok(expand_offsets(t.shape(), norm_shape).into_iter().map(|o| f[o]).collect())
    };
    let gamma = expand(scale)?;
    let beta = bias.map(expand).transpose()?.unwrap_or_else(|| vec![0.0; inner]);
    let mut v = x.f32s()?.to_vec();
    for row in v.chunks_mut(inner.max(1)) {
        let n = row.len() as f32;
        let mean = row.iter().sum::<f32>() / n;
        let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f32>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        for (j, e) in row.iter_mut().enumerate() {
            *e = (*e - mean) * inv * gamma[j] + beta[j];
        }
    }
    Ok(Tensor::f32(x.shape().to_vec(), v))
}

/// `c = a·b` for row-major `a: m×k`, `b: k×n` given as (row stride, column stride).
#[allow(clippy::too_many_arguments)]
fn sgemm(m: usize, k: usize, n: usize, a: &[f32], sa: (usize, usize), b: &[f32], sb: (usize, usize), c: &mut [f32]) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].fill(0.0);
        return;
    }
    debug_assert!(a.len() > (m - 1) * sa.0 + (k - 1) * sa.1);
    debug_assert!(b.len() > (k - 1) * sb.0 + (n - 1) * sb.1);
    // SAFETY: the asserted extents keep every access of the m×k, k×n and
    // m×n operands inside the borrowed slices.
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0,
            a.as_ptr(), sa.0 as isize, sa.1 as isize,
            b.as_ptr(), sb.0 as isize, sb.1 as isize,
            0.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

fn gemm(a: &Tensor, b: &Tensor, c: Option<&Tensor>, alpha: f32, beta: f32, ta: bool, tb: bool) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::Model(format!("Gemm needs matrices, got {:?} and {:?}", a.shape(), b.shape())));
    }
    let (m, k) = if ta { (a.shape()[1], a.shape()[0]) } else { (a.shape()[0], a.shape()[1]) };
    let (k2, n) = if tb { (b.shape()[1], b.shape()[0]) } else { (b.shape()[0], b.shape()[1]) };
    if k != k2 {
        return Err(Error::Model(format!("Gemm inner dimensions {k} and {k2} differ")));
    }
    let sa = if ta { (1, m) } else { (k, 1) };
    let sb = if tb { (1, k) } else { (n, 1) };
    let mut out = vec![0.0; m * n];
    sgemm(m, k, n, a.f32s()?, sa, b.f32s()?, sb, &mut out);
    if alpha != 1.0 {
        out.iter_mut().for_each(|v| *v *= alpha);
    }
    if let Some(c) = c {
        if beta != 0.0 {
            broadcast_shape(c.shape(), &[m, n])?;
            let cv = c.f32s()?;
            for (v, o) in out.iter_mut().zip(expand_offsets(c.shape(), &[m, n])) {
                *v += beta * cv[o];
            }
        }
    }
    Ok(Tensor::f32(vec![m, n], out))
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let promote_a = a.rank() == 1;
    let promote_b = b.rank() == 1;
    let ash: Vec<usize> = if promote_a { vec![1, a.shape()[0]] } else { a.shape().to_vec() };
    let bsh: Vec<usize> = if promote_b { vec![b.shape()[0], 1] } else { b.shape().to_vec() };
    if ash.len() < 2 || bsh.len() < 2 {
        return Err(Error::Model("MatMul on a scalar".into()));
    }
    let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
    if k != k2 {
        return Err(Error::Model(format!("MatMul shapes {:?} and {:?} do not align", a.shape(), b.shape())));
    }
    let (ab, bb) = (&ash[..ash.len() - 2], &bsh[..bsh.len() - 2]);
    let batch = broadcast_shape(ab, bb)?;
    let count: usize = batch.iter().product();
    let (ai, bi) = (expand_offsets(ab, &batch), expand_offsets(bb, &batch));
    let (av, bv) = (a.f32s()?, b.f32s()?);
    let mut out = vec![0.0; count * m * n];
    for (t, c) in out.chunks_mut((m * n).max(1)).enumerate().take(count) {
        let a_mat = &av[ai[t] * m * k..(ai[t] + 1) * m * k];
        let b_mat = &bv[bi[t] * k * n..(bi[t] + 1) * k * n];
        sgemm(m, k, n, a_mat, (k, 1), b_mat, (n, 1), c);
    }
    let mut shape = batch;
    if !promote_a {
        shape.push(m);
    }
    if !promote_b {
        shape.push(n);
    }
    Ok(Tensor::f32(shape, out))
}

impl Window {
    /// Output size and leading pad along one spatial axis.
    fn axis_out(&self, d: usize, input: usize, kernel: usize) -> Result<(usize, usize)> {
        let span = self.dilations[d] * (kernel - 1) + 1;
        let stride = self.strides[d];
        let (begin, end) = match self.auto_pad {
            AutoPad::NotSet => (self.pads[d], self.pads[d + 2]),
            AutoPad::Valid => (0, 0),
            AutoPad::SameUpper | AutoPad::SameLower => {
                let out = input.div_ceil(stride);
                let total = ((out - 1) * stride + span).saturating_sub(input);
                let small = total / 2;
                if self.auto_pad == AutoPad::SameUpper {
                    (small, total - small)
                } else {
                    (total - small, small)
                }
            }
        };
        let padded = input + begin + end;
        if padded < span {
            return Err(Error::Model(format!("window {span} larger than padded input {padded}")));
        }
        let mut out = if self.ceil_mode { (padded - span).div_ceil(stride) + 1 } else { (padded - span) / stride + 1 };
        // A trailing window must start inside the input or its leading pad.
        if self.ceil_mode && (out - 1) * stride >= input + begin {
            out -= 1;
        }
        Ok((out, begin))
    }
}

fn spatial(x: &Tensor, what: &str) -> Result<[usize; 4]> {
    match *x.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::Model(format!("{what} supports only N×C×H×W input, got {:?}", x.shape()))),
    }
}

fn conv(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, win: &Window, group: usize) -> Result<Tensor> {
    let [n, c, h, wd] = spatial(x, "Conv")?;
    let [m, cg, kh, kw] = spatial(w, "Conv weight")?;
    if let Some(k) = win.kernel {
        if k != [kh, kw] {
            return Err(Error::Model(format!("Conv kernel_shape {k:?} disagrees with weight {:?}", w.shape())));
        }
    }
    if cg * group != c || m % group != 0 {
        return Err(Error::Model(format!("Conv input {:?} and weight {:?} do not fit {group} groups", x.shape(), w.shape())));
    }
    let (oh, pt) = win.axis_out(0, h, kh)?;
    let (ow, pl) = win.axis_out(1, wd, kw)?;
    let (xv, wv) = (x.f32s()?, w.f32s()?);
    let bias = bias.map(|b| b.f32s()).transpose()?;
    if bias.is_some_and(|b| b.len() != m) {
        return Err(Error::Model("Conv bias length differs from output channels".into()));
    }
    let mg = m / group;
    let kk = cg * kh * kw;
    let p = oh * ow;
    let pointwise = kh == 1 && kw == 1 && win.strides == [1, 1] && pt == 0 && pl == 0 && oh == h && ow == wd;
    let mut col = if pointwise { Vec::new() } else { vec![0.0f32; kk * p] };
    let mut out = vec![0.0f32; n * m * p];
    for img in 0..n {
        for g in 0..group {
            let x_off = (img * c + g * cg) * h * wd;
            let b_mat: &[f32] = if pointwise {
                &xv[x_off..x_off + cg * h * wd]
            } else {
                im2col(&xv[x_off..x_off + cg * h * wd], cg, (h, wd), (kh, kw), (oh, ow), (pt, pl), win, &mut col);
                &col
            };
            let o_off = (img * m + g * mg) * p;
            sgemm(mg, kk, p, &wv[g * mg * kk..(g + 1) * mg * kk], (kk, 1), b_mat, (p, 1), &mut out[o_off..o_off + mg * p]);
        }
        if let Some(b) = bias {
            for (ch, row) in out[img * m * p..(img + 1) * m * p].chunks_mut(p.max(1)).enumerate() {
                row.iter_mut().for_each(|v| *v += b[ch]);
            }
        }
    }
    Ok(Tensor::f32(vec![n, m, oh, ow], out))
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    channels: usize,
    (h, w): (usize, usize),
    (kh, kw): (usize, usize),
    (oh, ow): (usize, usize),
    (pt, pl): (usize, usize),
    win: &Window,
    col: &mut [f32],
) {
    let [sh, sw] = win.strides;
    let [dh, dw] = win.dilations;
    let p = oh * ow;
    for ch in 0..channels {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut col[((ch * kh + ki) * kw + kj) * p..][..p];
                for oy in 0..oh {
                    let iy = (oy * sh + ki * dh) as isize - pt as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * sw + kj * dw) as isize - pl as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn pool(x: &Tensor, win: &Window, kind: PoolKind) -> Result<Tensor> {
    let [n, c, h, w] = spatial(x, "pooling")?;
    let [kh, kw] = win.kernel.expect("pool kernel checked at parse");
    let (oh, pt) = win.axis_out(0, h, kh)?;
    let (ow, pl) = win.axis_out(1, w, kw)?;
    let [sh, sw] = win.strides;
    let [dh, dw] = win.dilations;
    // Padded extent used as the averaging divisor bound when padding counts.
    let (ph, pw) = (h + pt + win.pads[2], w + pl + win.pads[3]);
    let xv = x.f32s()?;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in xv.chunks(h * w).take(n * c) {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let (mut sum, mut count, mut padded_count) = (0.0f32, 0usize, 0usize);
                for ki in 0..kh {
                    let iy = (oy * sh + ki * dh) as isize - pt as isize;
                    for kj in 0..kw {
                        let ix = (ox * sw + kj * dw) as isize - pl as isize;
                        if iy + (pt as isize) < ph as isize && ix + (pl as isize) < pw as isize {
                            padded_count += 1;
                        }
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        let v = plane[iy as usize * w + ix as usize];
                        best = best.max(v);
                        sum += v;
                        count += 1;
                    }
                }
                out.push(match kind {
                    PoolKind::Max => best,
                    PoolKind::Average { count_include_pad: true } => sum / padded_count.max(1) as f32,
                    PoolKind::Average { count_include_pad: false } => sum / count.max(1) as f32,
                });
            }
        }
    }
    Ok(Tensor::f32(vec![n, c, oh, ow], out))
}

fn global_average_pool(x: &Tensor) -> Result<Tensor> {
    if x.rank() < 3 {
        return Err(Error::Model(format!("GlobalAveragePool input of rank {}", x.rank())));
    }
    let inner: usize = x.shape()[2..].iter().product();
    let v: Vec<f32> = x.f32s()?.chunks(inner.max(1)).map(|ch| ch.iter().sum::<f32>() / inner as f32).collect();
    let mut shape = x.shape()[..2].to_vec();
    shape.extend(std::iter::repeat_n(1, x.rank() - 2));
    Ok(Tensor::f32(shape, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn t(shape: &[usize], v: &[f32]) -> Tensor {
        Tensor::f32(shape.to_vec(), v.to_vec())
    }

    fn window(k: usize, stride: usize, pad: usize, ceil: bool) -> Window {
        Window {
            kernel: Some([k, k]),
            strides: [stride; 2],
            dilations: [1; 2],
            pads: [pad; 4],
            auto_pad: AutoPad::NotSet,
            ceil_mode: ceil,
        }
    }

    /// Direct convolution used as the reference for the im2col path.
    fn conv_reference(x: &[f32], (c, h, w): (usize, usize, usize), wt: &[f32], m: usize, k: usize, stride: usize, pad: usize) -> Vec<f32> {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; m * oh * ow];
        for o in 0..m {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for i in 0..k {
                            for j in 0..k {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xo * stride + j) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x[(ch * h + iy as usize) * w + ix as usize] * wt[((o * c + ch) * k + i) * k + j];
                                }
                            }
                        }
                    }
                    out[(o * oh + y) * ow + xo] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        let (c, h, w, m, k) = (3, 7, 6, 4, 3);
        let x: Vec<f32> = (0..c * h * w).map(|i| ((i * 37 % 11) as f32 - 5.0) / 7.0).collect();
        let wt: Vec<f32> = (0..m * c * k * k).map(|i| ((i * 13 % 7) as f32 - 3.0) / 5.0).collect();
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            let got = conv(&t(&[1, c, h, w], &x), &t(&[m, c, k, k], &wt), None, &window(k, stride, pad, false), 1).unwrap();
            let want = conv_reference(&x, (c, h, w), &wt, m, k, stride, pad);
            for (g, e) in got.f32s().unwrap().iter().zip(&want) {
                assert_relative_eq!(*g, *e, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn grouped_pointwise_conv_with_bias() {
        let x = t(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[2, 1, 1, 1], &[10.0, 100.0]);
        let b = t(&[2], &[0.5, -0.5]);
        let y = conv(&x, &w, Some(&b), &window(1, 1, 0, false), 2).unwrap();
        assert_eq!(y.f32s().unwrap(), &[10.5, 20.5, 299.5, 399.5]);
    }

    #[test]
    fn max_pool_ceil_mode_drops_window_starting_in_padding() {
        // 5 wide, kernel 2, stride 2: floor gives 2, ceil gives 3.
        let x = t(&[1, 1, 1, 5], &[1.0, 5.0, 2.0, 4.0, 3.0]);
        let mut win = window(1, 1, 0, true);
        win.kernel = Some([1, 2]);
        win.strides = [1, 2];
        let y = pool(&x, &win, PoolKind::Max).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 3]);
        assert_eq!(y.f32s().unwrap(), &[5.0, 4.0, 3.0]);
        // Stride 3 with one column of padding: a third window would start in
        // the trailing pad.
        win.strides = [1, 3];
        win.pads = [0, 1, 0, 1];
        let y = pool(&x, &win, PoolKind::Max).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 2]);
        assert_eq!(y.f32s().unwrap(), &[1.0, 4.0]);
    }

    #[test]
    fn average_pool_padding_counts() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let win = window(2, 1, 1, false);
        let excl = pool(&x, &win, PoolKind::Average { count_include_pad: false }).unwrap();
        assert_eq!(excl.f32s().unwrap()[0], 1.0);
        let incl = pool(&x, &win, PoolKind::Average { count_include_pad: true }).unwrap();
        assert_eq!(incl.f32s().unwrap()[0], 0.25);
        assert_eq!(incl.f32s().unwrap()[4], 2.5);
    }

    #[test]
    fn gemm_and_batched_matmul() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[2, 3], &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let c = t(&[2], &[10.0, 20.0]);
        let y = gemm(&a, &b, Some(&c), 1.0, 1.0, false, true).unwrap();
        assert_eq!(y.f32s().unwrap(), &[14.0, 22.0, 20.0, 25.0]);
        let y = gemm(&a, &a, None, 2.0, 1.0, true, false).unwrap();
        assert_eq!(y.shape(), &[3, 3]);
        assert_eq!(y.f32s().unwrap()[0], 2.0 * 17.0);

        let lhs = t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let rhs = t(&[2, 1], &[1.0, 1.0]);
        let y = matmul(&lhs, &rhs).unwrap();
        assert_eq!(y.shape(), &[2, 1, 1]);
        assert_eq!(y.f32s().unwrap(), &[3.0, 7.0]);
        let v = matmul(&t(&[2], &[1.0, 2.0]), &t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(v.shape(), &[2]);
        assert_eq!(v.f32s().unwrap(), &[7.0, 10.0]);
    }

    #[test]
    fn shape_manipulation() {
        let x = Tensor::i64(vec![2, 3], vec![0, 1, 2, 3, 4, 5]);
        let y = transpose(&x, None).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.i64s().unwrap(), &[0, 3, 1, 4, 2, 5]);
        let s = slice(&x, &[-1, 2], &[i64::MIN, i64::MAX], Some(&[1, 0]), Some(&[-1, 1])).unwrap();
        assert_eq!(s.shape(), &[0, 3]);
        let s = slice(&x, &[-1], &[i64::MIN], Some(&[1]), Some(&[-2])).unwrap();
        assert_eq!(s.i64s().unwrap(), &[2, 0, 5, 3]);
        let g = gather(&x, &Tensor::i64(vec![], vec![-1]), 1).unwrap();
        assert_eq!(g.shape(), &[2]);
        assert_eq!(g.i64s().unwrap(), &[2, 5]);
        let r = reshape(&x, &[0, -1, 1], false).unwrap();
        assert_eq!(r.shape(), &[2, 3, 1]);
        assert!(reshape(&x, &[4, -1], false).is_err());
    }

    #[test]
    fn softmax_reduce_and_norms() {
        let x = t(&[2, 2], &[0.0, 0.0, 1.0, 3.0]);
        let s = softmax(&x, 0, false).unwrap();
        assert_relative_eq!(s.f32s().unwrap()[0], 1.0 / (1.0 + 1f32.exp()), epsilon = 1e-6);
        let s = softmax(&x, -1, false).unwrap();
        assert_relative_eq!(s.f32s().unwrap()[0], 0.5, epsilon = 1e-6);
        let m = reduce_mean(&x, &[-1], true).unwrap();
        assert_eq!(m.shape(), &[2, 1]);
        assert_eq!(m.f32s().unwrap(), &[0.0, 2.0]);
        let l = layer_norm(&x, &t(&[2], &[1.0, 1.0]), None, -1, 0.0).unwrap();
        assert_relative_eq!(l.f32s().unwrap()[3], 1.0, epsilon = 1e-6);
        let bn = batch_norm(&t(&[1, 2, 1, 1], &[1.0, 1.0]), &t(&[2], &[2.0, 1.0]), &t(&[2], &[0.0, 1.0]), &t(&[2], &[0.0, 1.0]), &t(&[2], &[1.0, 4.0]), 0.0).unwrap();
        assert_eq!(bn.f32s().unwrap(), &[2.0, 1.0]);
    }

    #[test]
    fn integer_arithmetic_and_where() {
        let a = Tensor::i64(vec![3], vec![-7, 7, 6]);
        let b = Tensor::i64(vec![], vec![3]);
        let m = binary(Binary::Mod { fmod: false }, &a, &b).unwrap();
        assert_eq!(m.i64s().unwrap(), &[2, 1, 0]);
        let d = binary(Binary::Div, &a, &b).unwrap();
        assert_eq!(d.i64s().unwrap(), &[-2, 2, 2]);
        let eq = binary(Binary::Equal, &a, &Tensor::i64(vec![], vec![7])).unwrap();
        let w = where_select(&eq, &Tensor::i64(vec![], vec![1]), &a).unwrap();
        assert_eq!(w.i64s().unwrap(), &[-7, 1, 6]);
        assert!(binary(Binary::Add, &a, &t(&[1], &[1.0])).is_err());
        assert!(binary(Binary::Div, &a, &Tensor::i64(vec![], vec![0])).is_err());
    }
}
