//! Black-box classifiers: the attack only ever sees top-1 labels and the
//! softmax probability of the true label.

mod descriptor;
mod linear;
#[cfg(feature = "onnx")]
mod onnx;

pub use descriptor::PreprocessingDescriptor;
pub use linear::{load_linear_oracle, DenseLayer, LinearOracle};
#[cfg(feature = "onnx")]
pub use onnx::{load_onnx_oracle, OnnxOracle};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ImageBatch, ImageShape};

pub const DEFAULT_MICRO_BATCH: usize = 64;

/// A classifier exposing raw logits. Implementations must be deterministic
/// and free of interior mutability visible to callers.
pub trait ClassifierOracle<T: Scalar>: Send + Sync {
    fn num_classes(&self) -> usize;

    fn input_shape(&self) -> ImageShape;

    /// Logits for `n` images packed contiguously (`n × C×H×W`), returned
    /// row-major as `n × num_classes`.
    fn logits(&self, images: &[T], n: usize) -> Result<Vec<T>>;

    /// Largest number of images handed to a single [`logits`](Self::logits) call.
    fn micro_batch(&self) -> usize {
        DEFAULT_MICRO_BATCH
    }
}

impl<T: Scalar, O: ClassifierOracle<T> + ?Sized> ClassifierOracle<T> for Box<O> {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }
    fn input_shape(&self) -> ImageShape {
        (**self).input_shape()
    }
    fn logits(&self, images: &[T], n: usize) -> Result<Vec<T>> {
        (**self).logits(images, n)
    }
    fn micro_batch(&self) -> usize {
        (**self).micro_batch()
    }
}

/// Per-image top-1 class and softmax probability of the ground-truth label.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub top1: Vec<usize>,
    pub probs_true_label: Vec<T>,
}

impl<T: Scalar> Prediction<T> {
    pub fn correct(&self, labels: &[usize]) -> usize {
        self.top1.iter().zip(labels).filter(|(p, l)| p == l).count()
    }

    pub fn mean_confidence(&self) -> T {
        let n = T::from_usize_lossy(self.probs_true_label.len().max(1));
        self.probs_true_label.iter().copied().sum::<T>() / n
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn predict<T, O>(oracle: &O, batch: &ImageBatch<T>) -> Result<Prediction<T>>
where
    T: Scalar,
    O: ClassifierOracle<T> + ?Sized,
{
    let shape = oracle.input_shape();
    if batch.shape() != shape {
        return Err(Error::shape(shape, batch.shape()));
    }
    let k = oracle.num_classes();
    if let Some(bad) = batch.labels().iter().find(|l| **l >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let per_image = shape.len();
    let step = oracle.micro_batch().max(1);
    let mut top1 = Vec::with_capacity(batch.len());
    let mut probs_true_label = Vec::with_capacity(batch.len());
    for (chunk_idx, chunk) in batch.data().chunks(step * per_image).enumerate() {
        let n = chunk.len() / per_image;
        let mut logits = oracle.logits(chunk, n)?;
        if logits.len() != n * k {
            return Err(Error::Model(format!(
                "oracle returned {} logits for {n} images of {k} classes",
                logits.len()
            )));
        }
        for (j, row) in logits.chunks_exact_mut(k).enumerate() {
            top1.push(argmax(row));
            softmax_in_place(row);
            probs_true_label.push(row[batch.labels()[chunk_idx * step + j]]);
        }
    }
    Ok(Prediction {
        top1,
        probs_true_label,
    })
}

/// Fraction of images whose top-1 prediction equals the label.
pub fn accuracy<T, O>(oracle: &O, batch: &ImageBatch<T>) -> Result<T>
where
    T: Scalar,
    O: ClassifierOracle<T> + ?Sized,
{
    let pred = predict(oracle, batch)?;
    Ok(T::from_usize_lossy(pred.correct(batch.labels())) / T::from_usize_lossy(batch.len()))
}
