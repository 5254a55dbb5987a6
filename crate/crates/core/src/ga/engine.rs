//! The generational loop.

use std::fmt;
use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};

use super::checkpoint::{Checkpoint, ConvergenceState};
use super::operators::{init_population, mutate, pixel_clean, tournament_select, uniform_crossover};
use super::schedule::{GenerationRates, Schedules};
use super::GaConfig;
use crate::error::{Error, Result};
use crate::fitness::{evaluate_population, FitnessReport, FitnessSettings};
use crate::oracle::ClassifierOracle;
use crate::reporting::GenerationRecord;
use crate::scalar::Scalar;
use crate::tensor::{l2_norm_255, ImageBatch, ImageShape, NormalizationSpec, Perturbation, PerturbationBounds};
use crate::GaRng;

#[derive(Debug, Clone, PartialEq)]
pub struct Population<T> {
    pub chromosomes: Vec<Perturbation<T>>,
    pub generation: usize,
}

impl<T> Population<T> {
    pub fn len(&self) -> usize {
        self.chromosomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chromosomes.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminationReason {
    MaxGenerations,
    Converged,
    DesiredFitness,
}

impl fmt::Display for TerminationReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TerminationReason::MaxGenerations => "max_generations",
            TerminationReason::Converged => "converged",
            TerminationReason::DesiredFitness => "desired_fitness",
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunResult<T> {
    pub best: Perturbation<T>,
    pub best_report: FitnessReport<T>,
    pub history: Vec<GenerationRecord>,
    pub termination_reason: TerminationReason,
}

/// A run that stopped on an error; `history` holds every completed generation.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub history: Vec<GenerationRecord>,
}

impl fmt::Display for RunFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "run aborted after {} generations: {}", self.history.len(), self.error)
    }
}

impl std::error::Error for RunFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Evaluation batches, indexed by generation.
pub trait BatchProvider<T: Scalar>: Sync {
    fn image_shape(&self) -> ImageShape;

    /// The batch scored at `generation` when switching every `period` generations.
    fn batch_for_generation(&self, generation: usize, period: usize) -> Result<ImageBatch<T>>;
}

/// Hooks called at generation boundaries.
pub trait GenerationObserver<T: Scalar> {
    fn on_generation(
        &mut self,
        _record: &GenerationRecord,
        _population: &Population<T>,
        _reports: &[FitnessReport<T>],
        _best: usize,
    ) -> Result<()> {
        Ok(())
    }
}

impl<T: Scalar> GenerationObserver<T> for () {}

/// Index of the highest net fitness; ties go to the lowest index.
pub fn best_index<T: Scalar>(reports: &[FitnessReport<T>]) -> usize {
    let mut best = 0;
    for (i, r) in reports.iter().enumerate().skip(1) {
        if r.net_fitness > reports[best].net_fitness {
            best = i;
        }
    }
    best
}

/// Variation applied to one selected pair: optional crossover, then per
/// child conditional pixel cleaning and optional mutation. `take` limits how
/// many children are kept (the last pairing of an odd population keeps one).
#[allow(clippy::too_many_arguments)]
pub fn breed_pair<T: Scalar, R: Rng + ?Sized>(
    a: &Perturbation<T>,
    b: &Perturbation<T>,
    take: usize,
    cfg: &GaConfig,
    bounds: &PerturbationBounds<T>,
    norm: &NormalizationSpec<T>,
    rates: &GenerationRates<T>,
    rng: &mut R,
) -> Result<Vec<Perturbation<T>>> {
    let (c1, c2) = if rng.random_bool(rates.p_cross.clamp(0.0, 1.0)) {
        uniform_crossover(a, b, rng)?
    } else {
        (a.clone(), b.clone())
    };
    let mut out = Vec::with_capacity(2);
    for mut child in [c1, c2].into_iter().take(take) {
        let l2 = l2_norm_255(&child, norm);
        pixel_clean(&mut child, l2, rates.epsilon, cfg.lambda_t0, rng);
        if rng.random_bool(rates.p_mut.clamp(0.0, 1.0)) {
            mutate(&mut child, bounds, cfg.p_flip, rng)?;
        }
        out.push(child);
    }
    Ok(out)
}

/// Builds the next generation entirely from offspring; nothing from
/// `state` is carried over unchanged by construction.
#[allow(clippy::too_many_arguments)]
pub fn step_generation<T: Scalar, R: Rng + ?Sized>(
    state: &Population<T>,
    reports: &[FitnessReport<T>],
    cfg: &GaConfig,
    bounds: &PerturbationBounds<T>,
    norm: &NormalizationSpec<T>,
    rates: &GenerationRates<T>,
    rng: &mut R,
) -> Result<Population<T>> {
    if reports.len() != state.len() {
        return Err(Error::InvalidArgument(format!(
            "{} reports for a population of {}",
            reports.len(),
            state.len()
        )));
    }
    let r = cfg.population_size;
    let mut offspring = Vec::with_capacity(r);
    while offspring.len() < r {
        let i = tournament_select(reports, cfg.tournament_size, rng);
        let j = tournament_select(reports, cfg.tournament_size, rng);
        let take = (r - offspring.len()).min(2);
        offspring.extend(breed_pair(
            &state.chromosomes[i],
            &state.chromosomes[j],
            take,
            cfg,
            bounds,
            norm,
            rates,
            rng,
        )?);
    }
    Ok(Population {
        chromosomes: offspring,
        generation: state.generation + 1,
    })
}

#[derive(Debug, Clone)]
struct CheckpointPolicy {
    path: PathBuf,
    every: usize,
}

/// Owns the configuration of one attack; `run` may be called repeatedly.
#[derive(Debug, Clone)]
pub struct Engine<T> {
    cfg: GaConfig,
    schedules: Schedules<T>,
    settings: FitnessSettings<T>,
    bounds: PerturbationBounds<T>,
    norm: NormalizationSpec<T>,
    checkpoint: Option<CheckpointPolicy>,
}

impl<T: Scalar> Engine<T> {
    pub fn new(cfg: GaConfig, bounds: PerturbationBounds<T>, norm: NormalizationSpec<T>) -> Result<Self> {
        cfg.validate()?;
        let schedules = Schedules::from_config(&cfg)?;
        let settings = FitnessSettings {
            lambda: T::lit(cfg.lambda),
            gamma_mode: cfg.gamma_mode,
        };
        Ok(Self {
            cfg,
            schedules,
            settings,
            bounds,
            norm,
            checkpoint: None,
        })
    }

    /// Write a [`Checkpoint`] to `path` every `every` generations (0 disables).
    pub fn with_checkpoints(mut self, path: impl Into<PathBuf>, every: usize) -> Self {
        self.checkpoint = (every > 0).then(|| CheckpointPolicy {
            path: path.into(),
            every,
        });
        self
    }

    pub fn config(&self) -> &GaConfig {
        &self.cfg
    }

    pub fn schedules(&self) -> &Schedules<T> {
        &self.schedules
    }

    pub fn bounds(&self) -> &PerturbationBounds<T> {
        &self.bounds
    }

    pub fn normalization(&self) -> &NormalizationSpec<T> {
        &self.norm
    }

    pub fn initial_population(&self, rng: &mut GaRng) -> Population<T> {
        Population {
            chromosomes: init_population(&self.bounds, self.cfg.population_size, self.cfg.init_density, rng),
            generation: 0,
        }
    }

    pub fn run<O, D, Obs>(&self, oracle: &O, data: &D, observer: &mut Obs) -> Result<RunResult<T>, RunFailure>
    where
        O: ClassifierOracle<T> + ?Sized,
        D: BatchProvider<T> + ?Sized,
        Obs: GenerationObserver<T> + ?Sized,
    {
        let mut rng = GaRng::seed_from_u64(self.cfg.rng_seed);
        let population = self.initial_population(&mut rng);
        self.drive(oracle, data, observer, population, rng, ConvergenceState::default())
    }

    /// Continue a run from a checkpoint written by this configuration.
    pub fn resume<O, D, Obs>(
        &self,
        checkpoint: Checkpoint<T>,
        oracle: &O,
        data: &D,
        observer: &mut Obs,
    ) -> Result<RunResult<T>, RunFailure>
    where
        O: ClassifierOracle<T> + ?Sized,
        D: BatchProvider<T> + ?Sized,
        Obs: GenerationObserver<T> + ?Sized,
    {
        let fail = |error| RunFailure { error, history: Vec::new() };
        if checkpoint.population.len() != self.cfg.population_size {
            return Err(fail(Error::Config(format!(
                "checkpoint holds {} chromosomes, config expects {}",
                checkpoint.population.len(),
                self.cfg.population_size
            ))));
        }
        if checkpoint.population.chromosomes.iter().any(|c| c.shape() != self.bounds.shape()) {
            return Err(fail(Error::shape(self.bounds.shape(), "checkpoint chromosome shape")));
        }
        if checkpoint.population.generation >= self.cfg.max_generations {
            return Err(fail(Error::Config(format!(
                "checkpoint generation {} is past max_generations {}",
                checkpoint.population.generation, self.cfg.max_generations
            ))));
        }
        let rng = checkpoint.rng.restore();
        self.drive(oracle, data, observer, checkpoint.population, rng, checkpoint.convergence)
    }

    fn drive<O, D, Obs>(
        &self,
        oracle: &O,
        data: &D,
        observer: &mut Obs,
        mut population: Population<T>,
        mut rng: GaRng,
        mut convergence: ConvergenceState,
    ) -> Result<RunResult<T>, RunFailure>
    where
        O: ClassifierOracle<T> + ?Sized,
        D: BatchProvider<T> + ?Sized,
        Obs: GenerationObserver<T> + ?Sized,
    {
        let mut history = Vec::new();
        loop {
            let g = population.generation;
            let outcome = self.generation(oracle, data, observer, &population, &mut convergence);
            let (record, reports, best, done) = match outcome {
                Ok(v) => v,
                Err(error) => return Err(RunFailure { error, history }),
            };
            history.push(record);
            if let Some(reason) = done {
                return Ok(RunResult {
                    best: population.chromosomes.swap_remove(best),
                    best_report: reports[best],
                    history,
                    termination_reason: reason,
                });
            }
            let rates = GenerationRates {
                p_cross: record.p_cross as f64,
                p_mut: record.p_mut as f64,
                epsilon: reports[best].epsilon,
            };
            let stepped = step_generation(&population, &reports, &self.cfg, &self.bounds, &self.norm, &rates, &mut rng)
                .and_then(|next| {
                    self.maybe_checkpoint(&next, &rng, &convergence)?;
                    Ok(next)
                });
            population = match stepped {
                Ok(next) => next,
                Err(error) => return Err(RunFailure { error, history }),
            };
            debug_assert_eq!(population.generation, g + 1);
        }
    }

    #[allow(clippy::type_complexity)]
    fn generation<O, D, Obs>(
        &self,
        oracle: &O,
        data: &D,
        observer: &mut Obs,
        population: &Population<T>,
        convergence: &mut ConvergenceState,
    ) -> Result<(GenerationRecord, Vec<FitnessReport<T>>, usize, Option<TerminationReason>)>
    where
        O: ClassifierOracle<T> + ?Sized,
        D: BatchProvider<T> + ?Sized,
        Obs: GenerationObserver<T> + ?Sized,
    {
        let started = Instant::now();
        let g = population.generation;
        let batch = data.batch_for_generation(g, self.cfg.batch_rotation_period)?;
        let rates = self.schedules.at(g)?;
        let reports = evaluate_population(
            oracle,
            &population.chromosomes,
            &batch,
            g,
            &self.schedules.epsilon,
            &self.settings,
            &self.norm,
        )?;
        let best = best_index(&reports);
        let top = reports[best];
        let wall_ms = if self.cfg.record_timing {
            started.elapsed().as_millis() as u64
        } else {
            0
        };
        let record = GenerationRecord {
            generation: g,
            batch_id: batch.batch_id(),
            best_gamma: top.gamma.to_f32_lossy(),
            best_l2_255: top.l2_255.to_f32_lossy(),
            best_mse_255: top.mse_255.to_f32_lossy(),
            mean_confidence_true: top.mean_confidence_true.to_f32_lossy(),
            epsilon: rates.epsilon.to_f32_lossy(),
            p_cross: rates.p_cross as f32,
            p_mut: rates.p_mut as f32,
            wall_ms,
        };
        observer.on_generation(&record, population, &reports, best)?;

        let gamma = top.gamma.to_f64_lossy();
        let converged = convergence.observe(batch.batch_id(), gamma, self.cfg.convergence_delta);
        let reason = if gamma >= self.cfg.gamma_desired && top.satisfies_constraint() {
            Some(TerminationReason::DesiredFitness)
        } else if converged {
            Some(TerminationReason::Converged)
        } else if g + 1 >= self.cfg.max_generations {
            Some(TerminationReason::MaxGenerations)
        } else {
            None
        };
        Ok((record, reports, best, reason))
    }

    fn maybe_checkpoint(&self, next: &Population<T>, rng: &GaRng, convergence: &ConvergenceState) -> Result<()> {
        let Some(policy) = &self.checkpoint else {
            return Ok(());
        };
        if !next.generation.is_multiple_of(policy.every) || next.generation >= self.cfg.max_generations {
            return Ok(());
        }
        Checkpoint::capture(next, rng, *convergence).save(&policy.path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ga::operators::random_chromosome;

    fn setup() -> (GaConfig, PerturbationBounds<f64>, NormalizationSpec<f64>) {
        let shape = ImageShape::rgb(4, 4);
        let bounds = PerturbationBounds::symmetric(shape, vec![0.3; shape.len()]).unwrap();
        (GaConfig::default(), bounds, NormalizationSpec::imagenet())
    }

    fn reports(n: usize) -> Vec<FitnessReport<f64>> {
        (0..n)
            .map(|i| FitnessReport {
                gamma: 0.0,
                mse_255: 0.0,
                l2_255: 0.0,
                epsilon: 85.0,
                penalty: 0.0,
                net_fitness: i as f64 * 0.01,
                mean_confidence_true: 0.5,
            })
            .collect()
    }

    #[test]
    fn inert_operators_copy_selected_parents() {
        let (mut cfg, bounds, norm) = setup();
        cfg.population_size = 7;
        cfg.lambda_t0 = 0.0;
        let mut rng = GaRng::seed_from_u64(1);
        let chromosomes: Vec<_> = (0..7).map(|_| random_chromosome(&bounds, 0.5, &mut rng)).collect();
        let pop = Population { chromosomes, generation: 3 };
        let rates = GenerationRates { p_cross: 0.0, p_mut: 0.0, epsilon: 1e-9 };
        let next = step_generation(&pop, &reports(7), &cfg, &bounds, &norm, &rates, &mut rng).unwrap();
        assert_eq!(next.len(), 7);
        assert_eq!(next.generation, 4);
        for child in &next.chromosomes {
            assert!(pop.chromosomes.contains(child));
        }
    }

    #[test]
    fn forced_pair_with_certain_crossover_gives_complementary_children() {
        let (cfg, bounds, norm) = setup();
        let shape = bounds.shape();
        let a = Perturbation::from_genes(shape, vec![0.1; shape.len()]).unwrap();
        let b = Perturbation::from_genes(shape, vec![-0.1; shape.len()]).unwrap();
        let rates = GenerationRates { p_cross: 1.0, p_mut: 0.0, epsilon: 1e9 };
        let mut rng = GaRng::seed_from_u64(2);
        let kids = breed_pair(&a, &b, 2, &cfg, &bounds, &norm, &rates, &mut rng).unwrap();
        assert_eq!(kids.len(), 2);
        for (x, y) in kids[0].genes().iter().zip(kids[1].genes()) {
            assert_eq!(*x, -*y);
        }
        assert!(kids[0].genes().iter().any(|g| *g > 0.0) && kids[0].genes().iter().any(|g| *g < 0.0));
    }

    #[test]
    fn step_keeps_size_and_bounds() {
        let (mut cfg, bounds, norm) = setup();
        cfg.population_size = 9;
        let mut rng = GaRng::seed_from_u64(3);
        let chromosomes: Vec<_> = (0..9).map(|_| random_chromosome(&bounds, 1.0, &mut rng)).collect();
        let mut pop = Population { chromosomes, generation: 0 };
        let rates = GenerationRates { p_cross: 0.9, p_mut: 1.0, epsilon: 1.0 };
        for _ in 0..20 {
            pop = step_generation(&pop, &reports(9), &cfg, &bounds, &norm, &rates, &mut rng).unwrap();
            assert_eq!(pop.len(), 9);
            assert!(pop.chromosomes.iter().all(|c| bounds.contains(c)));
        }
        assert_eq!(pop.generation, 20);
    }

    #[test]
    fn previous_best_is_not_forced_into_offspring() {
        let (mut cfg, bounds, norm) = setup();
        cfg.population_size = 6;
        cfg.tournament_size = 1;
        cfg.lambda_t0 = 0.0;
        let mut rng = GaRng::seed_from_u64(4);
        let chromosomes: Vec<_> = (0..6).map(|_| random_chromosome(&bounds, 1.0, &mut rng)).collect();
        let pop = Population { chromosomes, generation: 0 };
        let reps = reports(6);
        let best = pop.chromosomes[best_index(&reps)].clone();
        let rates = GenerationRates { p_cross: 0.0, p_mut: 0.0, epsilon: 1e9 };
        let missing = (0..200u64).any(|seed| {
            let mut rng = GaRng::seed_from_u64(seed);
            let next = step_generation(&pop, &reps, &cfg, &bounds, &norm, &rates, &mut rng).unwrap();
            !next.chromosomes.contains(&best)
        });
        assert!(missing);
    }

    #[test]
    fn mismatched_reports_are_rejected() {
        let (cfg, bounds, norm) = setup();
        let pop = Population { chromosomes: vec![Perturbation::zeros(bounds.shape())], generation: 0 };
        let rates = GenerationRates { p_cross: 0.0, p_mut: 0.0, epsilon: 1.0 };
        let mut rng = GaRng::seed_from_u64(0);
        assert!(step_generation(&pop, &reports(2), &cfg, &bounds, &norm, &rates, &mut rng).is_err());
    }
}
