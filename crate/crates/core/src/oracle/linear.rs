//! Dense linear / one-hidden-layer ReLU classifier and its weights file.
//!
//! File layout (little-endian):
//!
//! ```text
//! "UAPW" | u32 version=1 | u32 num_classes | u32 c | u32 h | u32 w | u8 has_hidden
//! [u32 hidden_dim]                      if has_hidden
//! f32 W1 (rows × c·h·w), f32 b1 (rows)  rows = hidden_dim or num_classes
//! [f32 W2 (num_classes × hidden_dim), f32 b2 (num_classes)]   if has_hidden
//! ```

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ClassifierOracle;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ImageShape;

const MAGIC: &[u8; 4] = b"UAPW";
const VERSION: u32 = 1;

/// Row-major `rows × cols` weights plus a bias per row.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    rows: usize,
    cols: usize,
    weights: Vec<T>,
    bias: Vec<T>,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(rows: usize, cols: usize, weights: Vec<T>, bias: Vec<T>) -> Result<Self> {
        if weights.len() != rows * cols {
            return Err(Error::shape(
                format!("{rows}x{cols} weight matrix"),
                format!("{} weights", weights.len()),
            ));
        }
        if bias.len() != rows {
            return Err(Error::shape(format!("bias of length {rows}"), bias.len()));
        }
        Ok(Self {
            rows,
            cols,
            weights,
            bias,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    fn forward_into(&self, x: &[T], out: &mut Vec<T>) {
        out.clear();
        out.extend(self.weights.chunks_exact(self.cols).zip(&self.bias).map(|(row, b)| {
            row.iter().zip(x).fold(*b, |acc, (w, v)| acc + *w * *v)
        }));
    }
}

/// `softmax(W·x + b)` or `softmax(W2·relu(W1·x + b1) + b2)`; softmax is applied
/// by [`predict`](super::predict).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearOracle<T> {
    shape: ImageShape,
    num_classes: usize,
    hidden: Option<DenseLayer<T>>,
    output: DenseLayer<T>,
    micro_batch: usize,
}

impl<T: Scalar> LinearOracle<T> {
    pub fn linear(shape: ImageShape, output: DenseLayer<T>) -> Result<Self> {
        if output.cols != shape.len() {
            return Err(Error::shape(
                format!("{} input columns for {shape}", shape.len()),
                output.cols,
            ));
        }
        Self::build(shape, None, output)
    }

    pub fn with_hidden(shape: ImageShape, hidden: DenseLayer<T>, output: DenseLayer<T>) -> Result<Self> {
        if hidden.cols != shape.len() {
            return Err(Error::shape(
                format!("{} hidden-layer columns for {shape}", shape.len()),
                hidden.cols,
            ));
        }
        if output.cols != hidden.rows {
            return Err(Error::shape(
                format!("{} output columns (hidden_dim)", hidden.rows),
                output.cols,
            ));
        }
        Self::build(shape, Some(hidden), output)
    }

    fn build(shape: ImageShape, hidden: Option<DenseLayer<T>>, output: DenseLayer<T>) -> Result<Self> {
        if output.rows == 0 {
            return Err(Error::InvalidArgument("oracle needs at least one class".into()));
        }
        Ok(Self {
            shape,
            num_classes: output.rows,
            hidden,
            output,
            micro_batch: super::DEFAULT_MICRO_BATCH,
        })
    }

    /// Dense weights drawn uniformly from `[-scale, scale]` with a seeded generator.
    pub fn random(shape: ImageShape, num_classes: usize, hidden_dim: Option<usize>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |rows: usize, cols: usize| {
            let scale = 1.0 / (cols as f64).sqrt();
            let w = (0..rows * cols).map(|_| T::lit(rng.random_range(-scale..scale))).collect();
            let b = (0..rows).map(|_| T::lit(rng.random_range(-scale..scale))).collect();
            DenseLayer::new(rows, cols, w, b)
        };
        match hidden_dim {
            Some(h) => {
                let hidden = layer(h, shape.len())?;
                let output = layer(num_classes, h)?;
                Self::with_hidden(shape, hidden, output)
            }
            None => Self::linear(shape, layer(num_classes, shape.len())?),
        }
    }

    pub fn with_micro_batch(mut self, n: usize) -> Self {
        self.micro_batch = n.max(1);
        self
    }

    pub fn hidden(&self) -> Option<&DenseLayer<T>> {
        self.hidden.as_ref()
    }

    pub fn output(&self) -> &DenseLayer<T> {
        &self.output
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        for v in [VERSION, self.num_classes as u32, self.shape.c as u32, self.shape.h as u32, self.shape.w as u32] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.push(u8::from(self.hidden.is_some()));
        if let Some(h) = &self.hidden {
            buf.extend_from_slice(&(h.rows as u32).to_le_bytes());
        }
        let layers = self.hidden.iter().chain(std::iter::once(&self.output));
        for layer in layers {
            for v in layer.weights.iter().chain(&layer.bias) {
                buf.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
            }
        }
        buf
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Parse {
                offset: 0,
                message: format!("bad magic {magic:?}, expected \"UAPW\""),
            });
        }
        let version_at = r.pos;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Parse {
                offset: version_at as u64,
                message: format!("unsupported version {version}"),
            });
        }
        let num_classes = r.u32("num_classes")? as usize;
        let c = r.u32("channel count")? as usize;
        let h = r.u32("height")? as usize;
        let w = r.u32("width")? as usize;
        let flag_at = r.pos;
        let has_hidden = match r.take(1, "has_hidden flag")?[0] {
            0 => false,
            1 => true,
            other => {
                return Err(Error::Parse {
                    offset: flag_at as u64,
                    message: format!("has_hidden flag must be 0 or 1, got {other}"),
                })
            }
        };
        let shape = ImageShape::new(c, h, w);
        let hidden_dim = if has_hidden { Some(r.u32("hidden_dim")? as usize) } else { None };
        let first_rows = hidden_dim.unwrap_or(num_classes);
        let w1 = r.f32s(first_rows * shape.len(), "W1")?;
        let b1 = r.f32s(first_rows, "b1")?;
        let first = DenseLayer::new(first_rows, shape.len(), w1, b1)?;
        let oracle = match hidden_dim {
            Some(hd) => {
                let w2 = r.f32s(num_classes * hd, "W2")?;
                let b2 = r.f32s(num_classes, "b2")?;
                Self::with_hidden(shape, first, DenseLayer::new(num_classes, hd, w2, b2)?)?
            }
            None => Self::linear(shape, first)?,
        };
        if r.pos != bytes.len() {
            return Err(Error::Parse {
                offset: r.pos as u64,
                message: format!("{} trailing bytes after b{}", bytes.len() - r.pos, if has_hidden { 2 } else { 1 }),
            });
        }
        Ok(oracle)
    }
}

pub fn load_linear_oracle<T: Scalar>(path: impl AsRef<Path>) -> Result<LinearOracle<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    LinearOracle::from_bytes(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::Parse {
                offset: self.pos as u64,
                message: format!(
                    "truncated in section {section}: need {n} bytes, {} available",
                    self.bytes.len() - self.pos
                ),
            }),
        }
    }

    fn u32(&mut self, section: &str) -> Result<u32> {
        let b = self.take(4, section)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s<T: Scalar>(&mut self, n: usize, section: &str) -> Result<Vec<T>> {
        let bytes = self.take(n.saturating_mul(4), section)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect())
    }
}

impl<T: Scalar> ClassifierOracle<T> for LinearOracle<T> {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn input_shape(&self) -> ImageShape {
        self.shape
    }

    fn logits(&self, images: &[T], n: usize) -> Result<Vec<T>> {
        let d = self.shape.len();
        if images.len() != n * d {
            return Err(Error::shape(format!("{n} images of {}", self.shape), format!("{} values", images.len())));
        }
        let mut out = Vec::with_capacity(n * self.num_classes);
        let mut hidden = Vec::new();
        let mut logits = Vec::new();
        for x in images.chunks_exact(d) {
            match &self.hidden {
                Some(layer) => {
                    layer.forward_into(x, &mut hidden);
                    for v in hidden.iter_mut() {
                        *v = v.max(T::zero());
                    }
                    self.output.forward_into(&hidden, &mut logits);
                }
                None => self.output.forward_into(x, &mut logits),
            }
            out.extend_from_slice(&logits);
        }
        Ok(out)
    }

    fn micro_batch(&self) -> usize {
        self.micro_batch
    }
}
