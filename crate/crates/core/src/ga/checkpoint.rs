//! Resumable snapshot of the loop state between two generations.
//!
//! Layout (little-endian):
//!
//! ```text
//! "UAPC" | u32 version=1 | u64 generation | u32 population | u32 c | u32 h | u32 w
//! [u8; 32] rng seed | u64 rng stream | u128 rng word position
//! u8 has_previous | u64 previous batch_id | f64 previous gamma | u32 streak
//! f64 genes (population × c·h·w)
//! ```

use std::path::Path;

use rand::SeedableRng;

use super::engine::Population;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ImageShape, Perturbation};
use crate::GaRng;

const MAGIC: &[u8; 4] = b"UAPC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &GaRng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> GaRng {
        let mut rng = GaRng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Same-batch convergence test: `|gamma_g - gamma_{g-1}| < delta` must hold
/// on two consecutive generation pairs that share a batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ConvergenceState {
    pub previous: Option<(usize, f64)>,
    pub streak: u32,
}

impl ConvergenceState {
    pub fn observe(&mut self, batch_id: usize, gamma: f64, delta: f64) -> bool {
        match self.previous {
            Some((prev_batch, prev_gamma)) if prev_batch == batch_id => {
                if (gamma - prev_gamma).abs() < delta {
                    self.streak += 1;
                } else {
                    self.streak = 0;
                }
            }
            _ => self.streak = 0,
        }
        self.previous = Some((batch_id, gamma));
        self.streak >= 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub population: Population<T>,
    pub rng: RngState,
    pub convergence: ConvergenceState,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn capture(population: &Population<T>, rng: &GaRng, convergence: ConvergenceState) -> Self {
        Self {
            population: population.clone(),
            rng: RngState::capture(rng),
            convergence,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let shape = self
            .population
            .chromosomes
            .first()
            .map(|c| c.shape())
            .unwrap_or(ImageShape::new(0, 0, 0));
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.population.generation as u64).to_le_bytes());
        for v in [self.population.len(), shape.c, shape.h, shape.w] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.extend_from_slice(&self.rng.seed);
        buf.extend_from_slice(&self.rng.stream.to_le_bytes());
        buf.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        let (has_prev, prev_batch, prev_gamma) = match self.convergence.previous {
            Some((b, g)) => (1u8, b as u64, g),
            None => (0u8, 0, 0.0),
        };
        buf.push(has_prev);
        buf.extend_from_slice(&prev_batch.to_le_bytes());
        buf.extend_from_slice(&prev_gamma.to_le_bytes());
        buf.extend_from_slice(&self.convergence.streak.to_le_bytes());
        for c in &self.population.chromosomes {
            for g in c.genes() {
                buf.extend_from_slice(&g.to_f64_lossy().to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            if bytes.len() < pos + n {
                return Err(Error::Parse {
                    offset: pos as u64,
                    message: format!("checkpoint truncated in {what}"),
                });
            }
            pos += n;
            Ok(&bytes[pos - n..pos])
        };
        if take(4, "magic")? != MAGIC {
            return Err(Error::Parse { offset: 0, message: "not a checkpoint file".into() });
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes"));
        let version = u32_at(take(4, "version")?);
        if version != VERSION {
            return Err(Error::Parse { offset: 4, message: format!("unsupported checkpoint version {version}") });
        }
        let generation = u64_at(take(8, "generation")?) as usize;
        let size = u32_at(take(4, "population size")?) as usize;
        let c = u32_at(take(4, "shape")?) as usize;
        let h = u32_at(take(4, "shape")?) as usize;
        let w = u32_at(take(4, "shape")?) as usize;
        let seed: [u8; 32] = take(32, "rng seed")?.try_into().expect("32 bytes");
        let stream = u64_at(take(8, "rng stream")?);
        let word_pos = u128::from_le_bytes(take(16, "rng position")?.try_into().expect("16 bytes"));
        let has_prev = take(1, "convergence state")?[0] == 1;
        let prev_batch = u64_at(take(8, "convergence state")?) as usize;
        let prev_gamma = f64::from_le_bytes(take(8, "convergence state")?.try_into().expect("8 bytes"));
        let streak = u32_at(take(4, "convergence state")?);
        let shape = ImageShape::new(c, h, w);
        let mut chromosomes = Vec::with_capacity(size);
        for _ in 0..size {
            let raw = take(shape.len() * 8, "genes")?;
            let genes = raw
                .chunks_exact(8)
                .map(|b| T::lit(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
                .collect();
            chromosomes.push(Perturbation::from_genes(shape, genes)?);
        }
        if pos != bytes.len() {
            return Err(Error::Parse { offset: pos as u64, message: "trailing bytes after genes".into() });
        }
        Ok(Self {
            population: Population { chromosomes, generation },
            rng: RngState { seed, stream, word_pos },
            convergence: ConvergenceState {
                previous: has_prev.then_some((prev_batch, prev_gamma)),
                streak,
            },
        })
    }

    /// Writes to a sibling temp file and renames, so an interrupted write
    /// never replaces the previous checkpoint with a partial one.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
