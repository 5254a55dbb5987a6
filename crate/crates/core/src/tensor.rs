//! Image and perturbation tensors.
//!
//! Images live in the *normalized* domain `(x01 - mean[c]) / std[c]`, laid out
//! `N×C×H×W`. A perturbation is a single `C×H×W` tensor in the same domain.
//! Visibility metrics (MSE, L2 norm) are reported in the unnormalized
//! `[0, pixel_scale]` domain.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Channel-first image geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl ImageShape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub const fn rgb(h: usize, w: usize) -> Self {
        Self { c: 3, h, w }
    }

    /// Number of scalars in one image.
    pub const fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn pixels(&self) -> usize {
        self.h * self.w
    }

    /// Channel of a flat `C×H×W` index.
    #[inline]
    pub const fn channel_of(&self, index: usize) -> usize {
        index / self.pixels()
    }
}

impl fmt::Display for ImageShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

/// Per-channel affine map between `[0, 1]` pixel intensities and the
/// normalized model-input domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationSpec<T> {
    pub mean: [T; 3],
    pub std: [T; 3],
    pub pixel_scale: T,
}

impl<T: Scalar> NormalizationSpec<T> {
    pub fn new(mean: [T; 3], std: [T; 3], pixel_scale: T) -> Result<Self> {
        if std.iter().any(|s| !(*s > T::zero())) {
            return Err(Error::InvalidArgument(format!(
                "std components must be strictly positive, got {std:?}"
            )));
        }
        if !(pixel_scale > T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "pixel_scale must be positive, got {pixel_scale}"
            )));
        }
        Ok(Self {
            mean,
            std,
            pixel_scale,
        })
    }

    pub fn from_f64(mean: [f64; 3], std: [f64; 3]) -> Result<Self> {
        Self::new(mean.map(T::lit), std.map(T::lit), T::lit(255.0))
    }

    /// ImageNet channel statistics, with the std vector as printed in the
    /// reference experiments (`[0.229, 0.225, 0.226]`).
    pub fn imagenet() -> Self {
        Self::from_f64([0.485, 0.456, 0.406], [0.229, 0.225, 0.226])
            .expect("constant normalization is valid")
    }

    /// `mean = 0`, `std = 1`: the normalized domain is plain `[0, 1]` intensity.
    pub fn identity() -> Self {
        Self::from_f64([0.0; 3], [1.0; 3]).expect("constant normalization is valid")
    }

    #[inline]
    pub fn normalize(&self, c: usize, x01: T) -> T {
        (x01 - self.mean[c]) / self.std[c]
    }

    #[inline]
    pub fn denormalize(&self, c: usize, x: T) -> T {
        x * self.std[c] + self.mean[c]
    }

    /// Normalized value to the `[0, pixel_scale]` domain.
    #[inline]
    pub fn to_pixel(&self, c: usize, x: T) -> T {
        self.denormalize(c, x) * self.pixel_scale
    }

    #[inline]
    pub fn from_pixel(&self, c: usize, p: T) -> T {
        self.normalize(c, p / self.pixel_scale)
    }

    /// A normalized-domain difference expressed in pixel units.
    #[inline]
    pub fn delta_to_pixel(&self, c: usize, d: T) -> T {
        d * self.std[c] * self.pixel_scale
    }

    #[inline]
    pub fn delta_from_pixel(&self, c: usize, d: T) -> T {
        d / (self.std[c] * self.pixel_scale)
    }

    /// Normalized-domain images of pixel values `0` and `pixel_scale`.
    #[inline]
    pub fn valid_range(&self, c: usize) -> (T, T) {
        (self.normalize(c, T::zero()), self.normalize(c, T::one()))
    }

    pub fn cast<U: Scalar>(&self) -> NormalizationSpec<U> {
        let cv = |v: T| U::lit(v.to_f64_lossy());
        NormalizationSpec {
            mean: self.mean.map(cv),
            std: self.std.map(cv),
            pixel_scale: cv(self.pixel_scale),
        }
    }
}

impl<T: Scalar> Default for NormalizationSpec<T> {
    fn default() -> Self {
        Self::imagenet()
    }
}

/// A batch of normalized images with ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch<T> {
    shape: ImageShape,
    data: Vec<T>,
    labels: Vec<usize>,
    batch_id: usize,
}

impl<T: Scalar> ImageBatch<T> {
    pub fn new(shape: ImageShape, data: Vec<T>, labels: Vec<usize>, batch_id: usize) -> Result<Self> {
        if shape.c != 3 {
            return Err(Error::InvalidArgument(format!(
                "images must have 3 channels, got {}",
                shape.c
            )));
        }
        if labels.is_empty() {
            return Err(Error::InvalidArgument("batch must hold at least one image".into()));
        }
        if data.len() != labels.len() * shape.len() {
            return Err(Error::shape(
                format!("{} values ({} images of {shape})", labels.len() * shape.len(), labels.len()),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            labels,
            batch_id,
        })
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn batch_id(&self) -> usize {
        self.batch_id
    }

    pub fn image(&self, i: usize) -> &[T] {
        let n = self.shape.len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn images(&self) -> impl ExactSizeIterator<Item = &[T]> {
        self.data.chunks_exact(self.shape.len())
    }

    /// First `n` images (all of them if `n >= len`).
    pub fn take(&self, n: usize) -> Self {
        let n = n.clamp(1, self.len());
        Self {
            shape: self.shape,
            data: self.data[..n * self.shape.len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            batch_id: self.batch_id,
        }
    }

    pub fn into_parts(self) -> (ImageShape, Vec<T>, Vec<usize>, usize) {
        (self.shape, self.data, self.labels, self.batch_id)
    }
}

/// The universal perturbation: one gene per `(channel, pixel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation<T> {
    shape: ImageShape,
    genes: Vec<T>,
}

impl<T: Scalar> Perturbation<T> {
    pub fn zeros(shape: ImageShape) -> Self {
        Self {
            shape,
            genes: vec![T::zero(); shape.len()],
        }
    }

    pub fn from_genes(shape: ImageShape, genes: Vec<T>) -> Result<Self> {
        if genes.len() != shape.len() {
            return Err(Error::shape(
                format!("{} genes for {shape}", shape.len()),
                format!("{} genes", genes.len()),
            ));
        }
        Ok(Self { shape, genes })
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn genes(&self) -> &[T] {
        &self.genes
    }

    pub fn genes_mut(&mut self) -> &mut [T] {
        &mut self.genes
    }

    pub fn into_genes(self) -> Vec<T> {
        self.genes
    }

    pub fn count_nonzero(&self) -> usize {
        self.genes.iter().filter(|g| !g.is_zero()).count()
    }

    /// Re-express the perturbation for a model with different normalization,
    /// keeping its pixel-domain values fixed.
    pub fn renormalize(&self, from: &NormalizationSpec<T>, to: &NormalizationSpec<T>) -> Self {
        let genes = self
            .genes
            .iter()
            .enumerate()
            .map(|(i, &g)| {
                let c = self.shape.channel_of(i);
                to.delta_from_pixel(c, from.delta_to_pixel(c, g))
            })
            .collect();
        Self {
            shape: self.shape,
            genes,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Perturbation<U> {
        Perturbation {
            shape: self.shape,
            genes: self.genes.iter().map(|g| U::lit(g.to_f64_lossy())).collect(),
        }
    }
}

/// Symmetric per-gene box `[-upper, upper]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationBounds<T> {
    shape: ImageShape,
    upper: Vec<T>,
}

impl<T: Scalar> PerturbationBounds<T> {
    pub fn symmetric(shape: ImageShape, upper: Vec<T>) -> Result<Self> {
        if upper.len() != shape.len() {
            return Err(Error::shape(
                format!("{} bounds for {shape}", shape.len()),
                format!("{}", upper.len()),
            ));
        }
        if let Some(bad) = upper.iter().find(|u| !(**u >= T::zero())) {
            return Err(Error::InvalidArgument(format!(
                "upper bounds must be non-negative, found {bad}"
            )));
        }
        Ok(Self { shape, upper })
    }

    pub fn shape(&self) -> ImageShape {
        self.shape
    }

    pub fn upper(&self) -> &[T] {
        &self.upper
    }

    pub fn lower(&self) -> Vec<T> {
        self.upper.iter().map(|u| -*u).collect()
    }

    #[inline]
    pub fn interval(&self, i: usize) -> (T, T) {
        (-self.upper[i], self.upper[i])
    }

    pub fn contains(&self, delta: &Perturbation<T>) -> bool {
        delta.shape == self.shape
            && delta
                .genes
                .iter()
                .zip(&self.upper)
                .all(|(g, u)| *g >= -*u && *g <= *u)
    }
}

/// Streaming per-pixel mean/variance (Welford), so bounds can be estimated
/// over several batches without holding them all in memory.
#[derive(Debug, Clone)]
pub struct BoundsAccumulator<T> {
    shape: ImageShape,
    count: usize,
    mean: Vec<T>,
    m2: Vec<T>,
}

impl<T: Scalar> BoundsAccumulator<T> {
    pub fn new(shape: ImageShape) -> Self {
        Self {
            shape,
            count: 0,
            mean: vec![T::zero(); shape.len()],
            m2: vec![T::zero(); shape.len()],
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn push_batch(&mut self, batch: &ImageBatch<T>) -> Result<()> {
        if batch.shape() != self.shape {
            return Err(Error::shape(self.shape, batch.shape()));
        }
        for image in batch.images() {
            self.count += 1;
            let n = T::from_usize_lossy(self.count);
            for ((x, mean), m2) in image.iter().zip(&mut self.mean).zip(&mut self.m2) {
                let d = *x - *mean;
                *mean += d / n;
                *m2 += d * (*x - *mean);
            }
        }
        Ok(())
    }

    /// Per-pixel mean over everything pushed so far.
    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    /// Population standard deviation (divide by N) as the symmetric bound.
    pub fn finish(&self) -> Result<PerturbationBounds<T>> {
        if self.count < 2 {
            return Err(Error::InvalidArgument(format!(
                "bounds need at least 2 images, got {}",
                self.count
            )));
        }
        let n = T::from_usize_lossy(self.count);
        let upper = self
            .m2
            .iter()
            .map(|m2| (m2.max(T::zero()) / n).sqrt())
            .collect();
        PerturbationBounds::symmetric(self.shape, upper)
    }
}

/// Per-pixel population standard deviation across the sample.
pub fn compute_bounds<T: Scalar>(sample: &ImageBatch<T>) -> Result<PerturbationBounds<T>> {
    let mut acc = BoundsAccumulator::new(sample.shape());
    acc.push_batch(sample)?;
    acc.finish()
}

/// Adds `delta` to every image and clamps the result to the valid pixel range.
///
/// The clamp is applied in the normalized domain against the images of `0`
/// and `pixel_scale`; the map between domains is monotone per channel, so
/// this is the same as clamping unnormalized pixels.
pub fn apply_perturbation<T: Scalar>(
    batch: &ImageBatch<T>,
    delta: &Perturbation<T>,
    norm: &NormalizationSpec<T>,
) -> Result<ImageBatch<T>> {
    let shape = batch.shape();
    if delta.shape() != shape {
        return Err(Error::shape(shape, delta.shape()));
    }
    let ranges: Vec<(T, T)> = (0..shape.c).map(|c| norm.valid_range(c)).collect();
    let plane = shape.pixels();
    let mut data = Vec::with_capacity(batch.data.len());
    for image in batch.images() {
        for (i, (x, d)) in image.iter().zip(delta.genes()).enumerate() {
            let (lo, hi) = ranges[i / plane];
            data.push((*x + *d).max(lo).min(hi));
        }
    }
    Ok(ImageBatch {
        shape,
        data,
        labels: batch.labels.clone(),
        batch_id: batch.batch_id,
    })
}

/// Mean squared pixel error in the `[0, pixel_scale]` domain, averaged over
/// every channel, pixel and image.
pub fn mse_255<T: Scalar>(
    clean: &ImageBatch<T>,
    perturbed: &ImageBatch<T>,
    norm: &NormalizationSpec<T>,
) -> Result<T> {
    if clean.shape() != perturbed.shape() || clean.len() != perturbed.len() {
        return Err(Error::shape(
            format!("{} images of {}", clean.len(), clean.shape()),
            format!("{} images of {}", perturbed.len(), perturbed.shape()),
        ));
    }
    let shape = clean.shape();
    let plane = shape.pixels();
    let mut sum = T::zero();
    for (a, b) in clean.images().zip(perturbed.images()) {
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            let d = norm.delta_to_pixel(i / plane, *x - *y);
            sum += d * d;
        }
    }
    Ok(sum / T::from_usize_lossy(clean.data.len()))
}

/// Euclidean norm of the perturbation in pixel units.
pub fn l2_norm_255<T: Scalar>(delta: &Perturbation<T>, norm: &NormalizationSpec<T>) -> T {
    let plane = delta.shape().pixels();
    delta
        .genes()
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let d = norm.delta_to_pixel(i / plane, *g);
            d * d
        })
        .sum::<T>()
        .sqrt()
}
