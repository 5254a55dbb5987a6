//! Universal adversarial perturbation search with a penalty-driven genetic
//! algorithm, plus the tooling around it: data loading, classifier oracles,
//! metrics and image export.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the scalar for the common cases.

pub mod attack;
pub mod data;
pub mod error;
pub mod fitness;
pub mod ga;
pub mod io;
pub mod oracle;
pub mod reporting;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{
    apply_perturbation, compute_bounds, l2_norm_255, mse_255, BoundsAccumulator, ImageBatch, ImageShape,
    NormalizationSpec, Perturbation, PerturbationBounds,
};

/// Generator used for every stochastic decision of a run.
pub type GaRng = rand_chacha::ChaCha8Rng;

pub type ImageBatchF32 = ImageBatch<f32>;
pub type ImageBatchF64 = ImageBatch<f64>;
pub type PerturbationF32 = Perturbation<f32>;
pub type PerturbationF64 = Perturbation<f64>;
pub type BoundsF32 = PerturbationBounds<f32>;
pub type BoundsF64 = PerturbationBounds<f64>;
pub type NormalizationF32 = NormalizationSpec<f32>;
pub type NormalizationF64 = NormalizationSpec<f64>;
pub type EngineF32 = ga::Engine<f32>;
pub type EngineF64 = ga::Engine<f64>;
pub type DatasetF32 = data::DatasetSource<f32>;
pub type DatasetF64 = data::DatasetSource<f64>;
