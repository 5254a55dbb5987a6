//! Datasets: a CSV manifest of pre-sized images, or a seeded synthetic set
//! for desk-scale experiments.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::ga::BatchProvider;
use crate::oracle::{accuracy, DenseLayer, LinearOracle};
use crate::reporting::{image_to_rgb, write_rgb_png};
use crate::scalar::Scalar;
use crate::tensor::{ImageBatch, ImageShape, NormalizationSpec};

pub const DEFAULT_BATCH_SIZE: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    path: String,
    label: i64,
}

#[derive(Debug, Clone)]
enum Storage<T> {
    Files,
    /// Normalized images in manifest order.
    Memory(Arc<Vec<T>>),
}

#[derive(Debug, Clone)]
pub struct DatasetOptions<T> {
    pub normalization: NormalizationSpec<T>,
    pub batch_size: usize,
    /// Labels must be below this when set.
    pub num_classes: Option<usize>,
    /// Fixed permutation of the manifest; `None` keeps manifest order.
    pub shuffle_seed: Option<u64>,
}

impl<T: Scalar> Default for DatasetOptions<T> {
    fn default() -> Self {
        Self {
            normalization: NormalizationSpec::imagenet(),
            batch_size: DEFAULT_BATCH_SIZE,
            num_classes: None,
            shuffle_seed: None,
        }
    }
}

/// A validated, fixed-order image collection partitioned into batches.
#[derive(Debug, Clone)]
pub struct DatasetSource<T> {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
    storage: Storage<T>,
    normalization: NormalizationSpec<T>,
    batch_size: usize,
    image_shape: ImageShape,
}

/// Reads and validates a `path,label` manifest. Image paths are relative to
/// the manifest's directory; only headers are decoded here.
pub fn load_dataset<T: Scalar>(manifest: impl AsRef<Path>, options: &DatasetOptions<T>) -> Result<DatasetSource<T>> {
    let manifest = manifest.as_ref();
    if options.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let root = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(manifest)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(manifest, io),
            other => Error::Config(format!("{}: {other:?}", manifest.display())),
        })?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["path", "label"] {
        return Err(Error::Dataset {
            row: 0,
            message: format!("manifest header must be \"path,label\", got {:?}", headers.iter().collect::<Vec<_>>()),
        });
    }
    let mut entries = Vec::new();
    let mut shape: Option<(u32, u32)> = None;
    for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| Error::Dataset { row: row_no, message: e.to_string() })?;
        let label = usize::try_from(row.label)
            .map_err(|_| Error::Dataset { row: row_no, message: format!("negative label {}", row.label) })?;
        if let Some(k) = options.num_classes {
            if label >= k {
                return Err(Error::Dataset {
                    row: row_no,
                    message: format!("label {label} out of range for {k} classes"),
                });
            }
        }
        let path = root.join(&row.path);
        let dims = image::image_dimensions(&path).map_err(|e| Error::Dataset {
            row: row_no,
            message: format!("{}: {e}", path.display()),
        })?;
        match shape {
            None => shape = Some(dims),
            Some(s) if s != dims => {
                return Err(Error::Dataset {
                    row: row_no,
                    message: format!("{} is {}x{}, expected {}x{}", path.display(), dims.0, dims.1, s.0, s.1),
                })
            }
            _ => {}
        }
        entries.push(ManifestEntry { path, label });
    }
    let Some((w, h)) = shape else {
        return Err(Error::Dataset { row: 0, message: "no images in manifest".into() });
    };
    if let Some(seed) = options.shuffle_seed {
        entries.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(DatasetSource {
        root,
        entries,
        storage: Storage::Files,
        normalization: options.normalization,
        batch_size: options.batch_size,
        image_shape: ImageShape::rgb(h as usize, w as usize),
    })
}

impl<T: Scalar> DatasetSource<T> {
    pub fn in_memory(
        shape: ImageShape,
        data: Vec<T>,
        labels: Vec<usize>,
        normalization: NormalizationSpec<T>,
        batch_size: usize,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Dataset { row: 0, message: "no images".into() });
        }
        if data.len() != labels.len() * shape.len() || shape.c != 3 {
            return Err(Error::shape(format!("{} images of {shape}", labels.len()), format!("{} values", data.len())));
        }
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        let entries = labels
            .into_iter()
            .enumerate()
            .map(|(i, label)| ManifestEntry { path: PathBuf::from(format!("mem:{i}")), label })
            .collect();
        Ok(Self {
            root: PathBuf::new(),
            entries,
            storage: Storage::Memory(Arc::new(data)),
            normalization,
            batch_size,
            image_shape: shape,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn image_shape(&self) -> ImageShape {
        self.image_shape
    }

    pub fn normalization(&self) -> &NormalizationSpec<T> {
        &self.normalization
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn num_batches(&self) -> usize {
        self.entries.len().div_ceil(self.batch_size)
    }

    /// The first `n` images only (all of them when `n >= len`).
    pub fn truncated(&self, n: usize) -> Self {
        let mut out = self.clone();
        out.entries.truncate(n.max(1));
        out
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    /// Same images re-expressed under another normalization.
    pub fn with_normalization(mut self, norm: NormalizationSpec<T>) -> Self {
        if let Storage::Memory(data) = &self.storage {
            let plane = self.image_shape.pixels();
            let per = self.image_shape.len();
            let converted = data
                .iter()
                .enumerate()
                .map(|(i, x)| {
                    let c = (i % per) / plane;
                    norm.normalize(c, self.normalization.denormalize(c, *x))
                })
                .collect();
            self.storage = Storage::Memory(Arc::new(converted));
        }
        self.normalization = norm;
        self
    }

    /// Batch `index` of the fixed partition; `batch_id` is set to `index`.
    pub fn batch(&self, index: usize) -> Result<ImageBatch<T>> {
        let nb = self.num_batches();
        if index >= nb {
            return Err(Error::InvalidArgument(format!("batch {index} out of range ({nb} batches)")));
        }
        let start = index * self.batch_size;
        let end = (start + self.batch_size).min(self.entries.len());
        let per = self.image_shape.len();
        let mut data = Vec::with_capacity((end - start) * per);
        for (offset, entry) in self.entries[start..end].iter().enumerate() {
            match &self.storage {
                Storage::Memory(all) => {
                    let i = start + offset;
                    data.extend_from_slice(&all[i * per..(i + 1) * per]);
                }
                Storage::Files => self.decode_into(start + offset, entry, &mut data)?,
            }
        }
        let labels = self.entries[start..end].iter().map(|e| e.label).collect();
        ImageBatch::new(self.image_shape, data, labels, index)
    }

    /// `floor(generation / period) mod num_batches`.
    pub fn batch_index_at(&self, generation: usize, period: usize) -> usize {
        (generation / period.max(1)) % self.num_batches()
    }

    pub fn batch_at(&self, generation: usize, period: usize) -> Result<ImageBatch<T>> {
        if period == 0 {
            return Err(Error::InvalidArgument("rotation period must be >= 1".into()));
        }
        self.batch(self.batch_index_at(generation, period))
    }

    fn decode_into(&self, row: usize, entry: &ManifestEntry, out: &mut Vec<T>) -> Result<()> {
        let img = image::open(&entry.path)
            .map_err(|e| Error::Dataset { row: row + 1, message: format!("{}: {e}", entry.path.display()) })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        if (h, w) != (self.image_shape.h, self.image_shape.w) {
            return Err(Error::Dataset {
                row: row + 1,
                message: format!("{} is {w}x{h}, expected {}x{}", entry.path.display(), self.image_shape.w, self.image_shape.h),
            });
        }
        let raw = img.as_raw();
        let scale = T::lit(255.0);
        for c in 0..3 {
            out.extend(
                raw[c..]
                    .iter()
                    .step_by(3)
                    .map(|v| self.normalization.normalize(c, T::lit(*v as f64) / scale)),
            );
        }
        Ok(())
    }

    /// Writes every image as an 8-bit PNG plus a `manifest.csv` under `dir`.
    pub fn write_png_dataset(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let images = dir.join("images");
        std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        let mut manifest = String::from("path,label\n");
        let (h, w) = (self.image_shape.h, self.image_shape.w);
        for index in 0..self.num_batches() {
            let batch = self.batch(index)?;
            for (j, (image, label)) in batch.images().zip(batch.labels()).enumerate() {
                let name = format!("img_{:05}.png", index * self.batch_size + j);
                write_rgb_png(images.join(&name), w as u32, h as u32, &image_to_rgb(image, h, w, &self.normalization))?;
                manifest.push_str(&format!("images/{name},{label}\n"));
            }
        }
        let path = dir.join("manifest.csv");
        std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

impl<T: Scalar> BatchProvider<T> for DatasetSource<T> {
    fn image_shape(&self) -> ImageShape {
        self.image_shape
    }

    fn batch_for_generation(&self, generation: usize, period: usize) -> Result<ImageBatch<T>> {
        self.batch_at(generation, period)
    }
}

type Pending<T> = (usize, JoinHandle<Result<ImageBatch<T>>>);

/// Keeps the current batch materialized and decodes the next scheduled batch
/// on a background thread.
pub struct ReadAhead<T: Scalar> {
    source: Arc<DatasetSource<T>>,
    state: Mutex<(Option<ImageBatch<T>>, Option<Pending<T>>)>,
}

impl<T: Scalar> ReadAhead<T> {
    pub fn new(source: DatasetSource<T>) -> Self {
        Self {
            source: Arc::new(source),
            state: Mutex::new((None, None)),
        }
    }

    pub fn source(&self) -> &DatasetSource<T> {
        &self.source
    }
}

impl<T: Scalar> BatchProvider<T> for ReadAhead<T> {
    fn image_shape(&self) -> ImageShape {
        self.source.image_shape()
    }

    fn batch_for_generation(&self, generation: usize, period: usize) -> Result<ImageBatch<T>> {
        let index = self.source.batch_index_at(generation, period);
        let mut state = self.state.lock().expect("read-ahead lock poisoned");
        if let Some(batch) = state.0.as_ref().filter(|b| b.batch_id() == index) {
            return Ok(batch.clone());
        }
        let batch = match state.1.take() {
            Some((pending, handle)) if pending == index => {
                handle.join().map_err(|_| Error::Dataset { row: 0, message: "decoder thread panicked".into() })??
            }
            _ => self.source.batch(index)?,
        };
        let next = (index + 1) % self.source.num_batches();
        if next != index {
            let source = Arc::clone(&self.source);
            state.1 = Some((next, std::thread::spawn(move || source.batch(next))));
        }
        state.0 = Some(batch.clone());
        Ok(batch)
    }
}

/// Geometry of the synthetic task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub n: usize,
    pub image_size: (usize, usize),
    pub seed: u64,
}

impl SyntheticSpec {
    pub const MODES_PER_CLASS: usize = 4;
    /// Intensity spacing between consecutive modes on the marker gene.
    pub const MODE_STEP: f64 = 0.03;
    pub const NOISE: f64 = 0.005;
}

/// Seeded class-conditional Gaussian images and a matching classifier.
///
/// Every image is a shared smooth background plus i.i.d. Gaussian noise. The
/// green channel of the center pixel carries the class: it is shifted by one of
/// `num_classes * 4` evenly spaced levels, and level `m` belongs to class
/// `m mod num_classes`, so each class is a union of Gaussian modes
/// interleaved with the other classes' modes along one direction.
///
/// The classifier has one hidden ReLU layer of hinge features on the
/// marker intensity (knots at the mode centers) and a readout fitted by
/// closed-form least squares on one-hot targets. Its clean accuracy is
/// checked before returning.
pub fn synthetic_dataset<T: Scalar>(
    spec: &SyntheticSpec,
    normalization: NormalizationSpec<T>,
    batch_size: usize,
) -> Result<(DatasetSource<T>, LinearOracle<T>)> {
    let (h, w) = spec.image_size;
    if spec.num_classes < 2 || spec.n < 2 || h < 2 || w < 2 {
        return Err(Error::InvalidArgument(format!("degenerate synthetic spec {spec:?}")));
    }
    let shape = ImageShape::rgb(h, w);
    let plane = shape.pixels();
    let modes = spec.num_classes * SyntheticSpec::MODES_PER_CLASS;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let patch = [plane + (h / 2) * w + w / 2];
    let mut base = vec![0.0f64; shape.len()];
    let (fy, fx): (f64, f64) = (rng.random_range(0.2..0.6), rng.random_range(0.2..0.6));
    for (c, chunk) in base.chunks_mut(plane).enumerate() {
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        for (p, v) in chunk.iter_mut().enumerate() {
            let (y, x) = ((p / w) as f64, (p % w) as f64);
            *v = 0.5 + 0.15 * (fy * y + fx * x + phase + c as f64).sin();
        }
    }
    let level = |m: usize| (m as f64 - (modes as f64 - 1.0) / 2.0) * SyntheticSpec::MODE_STEP;

    let mut order: Vec<usize> = (0..spec.n).map(|i| i % modes).collect();
    order.shuffle(&mut rng);
    let noise = Normal::new(0.0, SyntheticSpec::NOISE).expect("positive noise scale");
    let mut pixels = Vec::with_capacity(spec.n * shape.len());
    let mut labels = Vec::with_capacity(spec.n);
    for &m in &order {
        let start = pixels.len();
        pixels.extend(base.iter().map(|b| b + noise.sample(&mut rng)));
        for &p in &patch {
            pixels[start + p] += level(m);
        }
        for v in &mut pixels[start..] {
            *v = v.clamp(0.0, 1.0);
        }
        labels.push(m % spec.num_classes);
    }

    // Marker coordinate t(x) = marker intensity, as an affine map of the
    // normalized input.
    let weights: Vec<f64> = patch
        .iter()
        .map(|&p| normalization.std[p / plane].to_f64_lossy() / patch.len() as f64)
        .collect();
    let offset: f64 = patch
        .iter()
        .map(|&p| normalization.mean[p / plane].to_f64_lossy() / patch.len() as f64)
        .sum();
    let marker = |img: &[f64]| patch.iter().map(|&p| img[p]).sum::<f64>() / patch.len() as f64;
    let mut centers = vec![(0.0, 0usize); modes];
    for (img, &m) in pixels.chunks_exact(shape.len()).zip(&order) {
        centers[m].0 += marker(img);
        centers[m].1 += 1;
    }
    let centers: Vec<f64> = centers
        .iter()
        .enumerate()
        .map(|(m, (s, k))| if *k > 0 { s / *k as f64 } else { level(m) + marker(&base) })
        .collect();
    let mut knots = vec![centers[0] - 1.0];
    knots.extend_from_slice(&centers[1..modes - 1]);

    let hidden_dim = knots.len();
    let mut w1 = vec![T::zero(); hidden_dim * shape.len()];
    for j in 0..hidden_dim {
        for (&p, wp) in patch.iter().zip(&weights) {
            w1[j * shape.len() + p] = T::lit(*wp);
        }
    }
    let b1: Vec<T> = knots.iter().map(|k| T::lit(offset - k)).collect();
    let hidden = DenseLayer::new(hidden_dim, shape.len(), w1, b1)?;

    let features = |t: f64| knots.iter().map(move |k| (t - k).max(0.0)).chain(std::iter::once(1.0));
    let cols = hidden_dim + 1;
    let design = DMatrix::from_row_iterator(
        spec.n,
        cols,
        pixels.chunks_exact(shape.len()).flat_map(|img| features(marker(img)).collect::<Vec<_>>()),
    );
    let gram = design.transpose() * &design + DMatrix::identity(cols, cols) * 1e-9;
    let lu = gram.lu();
    let mut w2 = vec![T::zero(); spec.num_classes * hidden_dim];
    let mut b2 = vec![T::zero(); spec.num_classes];
    for class in 0..spec.num_classes {
        let target = DVector::from_iterator(spec.n, labels.iter().map(|l| if *l == class { 1.0 } else { 0.0 }));
        let coef = lu
            .solve(&(design.transpose() * target))
            .ok_or_else(|| Error::Model("least-squares system is singular".into()))?;
        for j in 0..hidden_dim {
            w2[class * hidden_dim + j] = T::lit(coef[j]);
        }
        b2[class] = T::lit(coef[hidden_dim]);
    }
    let oracle = LinearOracle::with_hidden(shape, hidden, DenseLayer::new(spec.num_classes, hidden_dim, w2, b2)?)?;

    let data = pixels
        .iter()
        .enumerate()
        .map(|(i, v)| normalization.normalize((i % shape.len()) / plane, T::lit(*v)))
        .collect();
    let source = DatasetSource::in_memory(shape, data, labels, normalization, batch_size)?;

    let mut correct = T::zero();
    for b in 0..source.num_batches() {
        let batch = source.batch(b)?;
        correct += accuracy(&oracle, &batch)? * T::from_usize_lossy(batch.len());
    }
    let acc = correct / T::from_usize_lossy(source.len());
    if acc < T::lit(0.95) {
        return Err(Error::Model(format!("synthetic oracle reaches only {acc} clean accuracy")));
    }
    Ok((source, oracle))
}
