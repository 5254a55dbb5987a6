use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitness::GammaMode;

/// Everything the evolutionary loop needs besides data, model and bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaConfig {
    pub population_size: usize,
    pub tournament_size: usize,
    pub p_cross_start: f64,
    pub p_cross_end: f64,
    pub p_mut_start: f64,
    pub p_mut_end: f64,
    /// Per-gene resampling probability inside a mutated chromosome.
    pub p_flip: f64,
    /// Per-gene zeroing probability of pixel cleaning.
    pub lambda_t0: f64,
    /// Expected fraction of nonzero genes in a fresh chromosome.
    pub init_density: f64,
    pub max_generations: usize,
    /// Convergence threshold on consecutive best-gamma values (same batch).
    pub convergence_delta: f64,
    pub gamma_desired: f64,
    /// Generations spent on each evaluation batch.
    pub batch_rotation_period: usize,
    pub rng_seed: u64,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Penalty weight per unit of L2 excess over epsilon.
    pub lambda: f64,
    pub gamma_mode: GammaMode,
    /// Write a resumable checkpoint every this many generations (0 disables).
    pub checkpoint_every: usize,
    /// Store measured wall time in generation records. Off by default so
    /// seeded runs produce byte-identical metrics.
    pub record_timing: bool,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population_size: 50,
            tournament_size: 3,
            p_cross_start: 0.9,
            p_cross_end: 0.4,
            p_mut_start: 0.6,
            p_mut_end: 0.2,
            p_flip: 0.005,
            lambda_t0: 0.05,
            init_density: 0.01,
            max_generations: 64,
            convergence_delta: 0.0,
            gamma_desired: 1.0,
            batch_rotation_period: 4,
            rng_seed: 0,
            eps_start: 85.0,
            eps_end: 35.0,
            lambda: 0.01,
            gamma_mode: GammaMode::Rate,
            checkpoint_every: 16,
            record_timing: false,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if self.population_size == 0 {
            return bad("population_size must be positive".into());
        }
        if self.tournament_size == 0 || self.tournament_size > self.population_size {
            return bad(format!(
                "tournament_size must be in 1..={}, got {}",
                self.population_size, self.tournament_size
            ));
        }
        for (name, start, end) in [
            ("p_cross", self.p_cross_start, self.p_cross_end),
            ("p_mut", self.p_mut_start, self.p_mut_end),
        ] {
            if !(unit(start) && unit(end) && end <= start) {
                return bad(format!("{name} needs 0 <= end <= start <= 1, got {start} -> {end}"));
            }
        }
        if !(self.p_flip > 0.0 && self.p_flip <= 1.0) {
            return bad(format!("p_flip must be in (0, 1], got {}", self.p_flip));
        }
        if !unit(self.lambda_t0) {
            return bad(format!("lambda_t0 must be in [0, 1], got {}", self.lambda_t0));
        }
        if !(self.init_density > 0.0 && self.init_density <= 1.0) {
            return bad(format!("init_density must be in (0, 1], got {}", self.init_density));
        }
        if self.max_generations == 0 {
            return bad("max_generations must be positive".into());
        }
        if !(self.convergence_delta >= 0.0) {
            return bad(format!("convergence_delta must be >= 0, got {}", self.convergence_delta));
        }
        if !(self.gamma_desired >= 0.0 && self.gamma_desired <= 1.0) {
            return bad(format!("gamma_desired must be in [0, 1], got {}", self.gamma_desired));
        }
        if self.batch_rotation_period == 0 {
            return bad("batch_rotation_period must be positive".into());
        }
        if !(self.eps_end > 0.0 && self.eps_start >= self.eps_end) {
            return bad(format!(
                "epsilon schedule needs eps_start >= eps_end > 0, got {} -> {}",
                self.eps_start, self.eps_end
            ));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        Ok(())
    }

    /// Last generation index; schedules reach their end values here.
    pub fn horizon(&self) -> usize {
        self.max_generations.saturating_sub(1)
    }
}
