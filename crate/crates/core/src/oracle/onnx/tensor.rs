//! Dense row-major tensors for graph execution.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Data {
    F32(Vec<f32>),
    I64(Vec<i64>),
    Bool(Vec<bool>),
}

impl Data {
    pub fn len(&self) -> usize {
        match self {
            Data::F32(v) => v.len(),
            Data::I64(v) => v.len(),
            Data::Bool(v) => v.len(),
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Data::F32(_) => "float",
            Data::I64(_) => "int64",
            Data::Bool(_) => "bool",
        }
    }

    /// Gathers `offsets` in order.
    pub fn take(&self, offsets: &[usize]) -> Data {
        fn pick<T: Copy>(src: &[T], offsets: &[usize]) -> Vec<T> {
            offsets.iter().map(|&o| src[o]).collect()
        }
        match self {
            Data::F32(v) => Data::F32(pick(v, offsets)),
            Data::I64(v) => Data::I64(pick(v, offsets)),
            Data::Bool(v) => Data::Bool(pick(v, offsets)),
        }
    }

    fn empty_like(&self, capacity: usize) -> Data {
        match self {
            Data::F32(_) => Data::F32(Vec::with_capacity(capacity)),
            Data::I64(_) => Data::I64(Vec::with_capacity(capacity)),
            Data::Bool(_) => Data::Bool(Vec::with_capacity(capacity)),
        }
    }

    fn extend_from(&mut self, other: &Data, range: std::ops::Range<usize>) -> Result<()> {
        match (self, other) {
            (Data::F32(a), Data::F32(b)) => a.extend_from_slice(&b[range]),
            (Data::I64(a), Data::I64(b)) => a.extend_from_slice(&b[range]),
            (Data::Bool(a), Data::Bool(b)) => a.extend_from_slice(&b[range]),
            (a, b) => {
                return Err(Error::Model(format!(
                    "cannot concatenate {} with {}",
                    a.type_name(),
                    b.type_name()
                )))
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Tensor {
    shape: Vec<usize>,
    data: Data,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Data) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?}");
        Self { shape, data }
    }

    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self::new(shape, Data::F32(data))
    }

    pub fn i64(shape: Vec<usize>, data: Vec<i64>) -> Self {
        Self::new(shape, Data::I64(data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &Data {
        &self.data
    }

    pub fn f32s(&self) -> Result<&[f32]> {
        match &self.data {
            Data::F32(v) => Ok(v),
            other => Err(Error::Model(format!("expected a float tensor, got {}", other.type_name()))),
        }
    }

    pub fn i64s(&self) -> Result<&[i64]> {
        match &self.data {
            Data::I64(v) => Ok(v),
            other => Err(Error::Model(format!("expected an int64 tensor, got {}", other.type_name()))),
        }
    }

    pub fn bools(&self) -> Result<&[bool]> {
        match &self.data {
            Data::Bool(v) => Ok(v),
            other => Err(Error::Model(format!("expected a bool tensor, got {}", other.type_name()))),
        }
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::Model(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        Ok(Tensor::new(shape, self.data.clone()))
    }

    pub fn gather(&self, shape: Vec<usize>, offsets: &[usize]) -> Tensor {
        Tensor::new(shape, self.data.take(offsets))
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Resolves a possibly negative axis against `rank` (`rank` itself allowed
/// when `inclusive`).
pub(crate) fn axis(a: i64, rank: usize, inclusive: bool) -> Result<usize> {
    let r = rank as i64 + inclusive as i64;
    let v = if a < 0 { a + r } else { a };
    if (0..r).contains(&v) {
        Ok(v as usize)
    } else {
        Err(Error::Model(format!("axis {a} out of range for rank {rank}")))
    }
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::Model(format!("shapes {a:?} and {b:?} do not broadcast"))),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed as `out` under broadcasting (0 on expanded axes).
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let lead = out.len() - shape.len();
    (0..out.len())
        .map(|i| if i < lead || shape[i - lead] == 1 { 0 } else { own[i - lead] })
        .collect()
}

/// Visits every index of `shape` in row-major order, calling `f` with the
/// offsets given by each stride set.
pub(crate) fn for_each_offset<const K: usize>(shape: &[usize], strides: [&[usize]; K], mut f: impl FnMut([usize; K])) {
    let total: usize = shape.iter().product();
    if total == 0 {
        return;
    }
    let rank = shape.len();
    if rank == 0 {
        f([0; K]);
        return;
    }
    let inner = shape[rank - 1];
    let step: [usize; K] = std::array::from_fn(|k| strides[k][rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let mut base = [0usize; K];
    loop {
        let mut off = base;
        for _ in 0..inner {
            f(off);
            for k in 0..K {
                off[k] += step[k];
            }
        }
        let mut d = rank - 1;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            for k in 0..K {
                base[k] += strides[k][d];
            }
            if idx[d] < shape[d] {
                break;
            }
            for k in 0..K {
                base[k] -= strides[k][d] * shape[d];
            }
            idx[d] = 0;
        }
    }
}

/// Offsets into a tensor of `shape` for every element of its broadcast to `out`.
pub(crate) fn expand_offsets(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = broadcast_strides(shape, out);
    let mut offsets = Vec::with_capacity(out.iter().product());
    for_each_offset(out, [&s], |[o]| offsets.push(o));
    offsets
}

pub(crate) fn broadcast_zip<A: Copy, B: Copy, O>(
    a: &[A],
    a_shape: &[usize],
    b: &[B],
    b_shape: &[usize],
    f: impl Fn(A, B) -> O,
) -> Result<(Vec<usize>, Vec<O>)> {
    if a_shape == b_shape {
        return Ok((a_shape.to_vec(), a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()));
    }
    let out = broadcast_shape(a_shape, b_shape)?;
    if b.len() == 1 {
        let y = b[0];
        if a.len() == out.iter().product::<usize>() {
            return Ok((out, a.iter().map(|x| f(*x, y)).collect()));
        }
    }
    let (sa, sb) = (broadcast_strides(a_shape, &out), broadcast_strides(b_shape, &out));
    let mut values = Vec::with_capacity(out.iter().product());
    for_each_offset(&out, [&sa, &sb], |[i, j]| values.push(f(a[i], b[j])));
    Ok((out, values))
}

pub(crate) fn concat(tensors: &[&Tensor], axis_index: i64) -> Result<Tensor> {
    let first = tensors.first().ok_or_else(|| Error::Model("Concat needs at least one input".into()))?;
    let rank = first.rank();
    let ax = axis(axis_index, rank, false)?;
    let mut out_shape = first.shape().to_vec();
    out_shape[ax] = 0;
    for t in tensors {
        let compatible = t.rank() == rank && (0..rank).all(|d| d == ax || t.shape()[d] == first.shape()[d]);
        if !compatible {
            return Err(Error::Model(format!("Concat shapes {:?} and {:?} differ off axis {ax}", first.shape(), t.shape())));
        }
        out_shape[ax] += t.shape()[ax];
    }
    let outer: usize = first.shape()[..ax].iter().product();
    let total: usize = out_shape.iter().product();
    let mut data = first.data().empty_like(total);
    for o in 0..outer {
        for t in tensors {
            let chunk: usize = t.shape()[ax..].iter().product();
            data.extend_from(t.data(), o * chunk..(o + 1) * chunk)?;
        }
    }
    Ok(Tensor::new(out_shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcasting_follows_numpy() {
        assert_eq!(broadcast_shape(&[2, 1, 3], &[4, 1]).unwrap(), vec![2, 4, 3]);
        assert!(broadcast_shape(&[2, 3], &[4]).is_err());
        let (shape, v) = broadcast_zip(&[1.0f32, 2.0, 3.0], &[3], &[10.0f32, 20.0], &[2, 1], |a, b| a + b).unwrap();
        assert_eq!(shape, vec![2, 3]);
        assert_eq!(v, vec![11.0, 12.0, 13.0, 21.0, 22.0, 23.0]);
    }

    #[test]
    fn expand_offsets_repeat_broadcast_axes() {
        assert_eq!(expand_offsets(&[2, 1], &[2, 3]), vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(expand_offsets(&[3], &[2, 3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(expand_offsets(&[], &[2]), vec![0, 0]);
    }

    #[test]
    fn concat_along_middle_axis() {
        let a = Tensor::i64(vec![2, 1], vec![1, 2]);
        let b = Tensor::i64(vec![2, 2], vec![3, 4, 5, 6]);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.i64s().unwrap(), &[1, 3, 4, 2, 5, 6]);
        assert!(concat(&[&a, &Tensor::f32(vec![2, 1], vec![0.0, 0.0])], 1).is_err());
    }
}
