//! End-to-end attack runs and cross-model evaluation on disk.
//!
//! A run directory holds:
//!
//! | file | written |
//! |------|---------|
//! | `metrics.csv` | one row per generation, as it completes |
//! | `perturbation_gen{NNN}.png` | best chromosome at generation 1 and every `snapshot_every` |
//! | `checkpoint.bin` | every `checkpoint_every` generations |
//! | `perturbation.bin`, `perturbation.png` | at termination |
//! | `attack_grid.png`, `convergence.svg` | at termination |
//! | `run.json` | last; its presence marks the run complete |

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetSource;
use crate::error::{Error, Result};
use crate::fitness::FitnessReport;
use crate::ga::{BatchProvider, Checkpoint, Engine, GaConfig, GenerationObserver, Population, RunResult};
use crate::io::save_perturbation;
use crate::oracle::{accuracy, ClassifierOracle};
use crate::reporting::{
    export_attack_grid, export_perturbation_image, read_records, write_convergence_svg, GenerationRecord, MetricsSink,
    METRICS_HEADER,
};
use crate::scalar::Scalar;
use crate::tensor::{apply_perturbation, BoundsAccumulator, NormalizationSpec, Perturbation, PerturbationBounds};

pub const METRICS_FILE: &str = "metrics.csv";
pub const PERTURBATION_FILE: &str = "perturbation.bin";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const SUMMARY_FILE: &str = "run.json";

#[derive(Debug, Clone, PartialEq)]
pub struct AttackSettings {
    pub out_dir: PathBuf,
    /// Replace a completed run in `out_dir`.
    pub force: bool,
    /// Continue from `checkpoint.bin` when the directory holds an unfinished run.
    pub resume: bool,
    pub snapshot_every: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl AttackSettings {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            force: false,
            resume: false,
            snapshot_every: 16,
            grid_rows: 4,
            grid_cols: 2,
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub termination_reason: String,
    pub generations: usize,
    pub final_gamma: f64,
    pub final_l2_255: f64,
    pub final_mse_255: f64,
    pub final_epsilon: f64,
    pub final_net_fitness: f64,
    /// Normalization of `perturbation.bin`.
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub config: GaConfig,
}

impl RunSummary {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn normalization<T: Scalar>(&self) -> Result<NormalizationSpec<T>> {
        NormalizationSpec::from_f64(self.mean, self.std)
    }
}

struct RunObserver<'a, T> {
    sink: MetricsSink,
    norm: &'a NormalizationSpec<T>,
    settings: &'a AttackSettings,
}

impl<T: Scalar> GenerationObserver<T> for RunObserver<'_, T> {
    fn on_generation(
        &mut self,
        record: &GenerationRecord,
        population: &Population<T>,
        _reports: &[FitnessReport<T>],
        best: usize,
    ) -> Result<()> {
        self.sink.append(record)?;
        log::info!(
            "generation {} batch {}: gamma {:.4} l2 {:.2} (eps {:.2}) mse {:.3}",
            record.generation,
            record.batch_id,
            record.best_gamma,
            record.best_l2_255,
            record.epsilon,
            record.best_mse_255
        );
        let k = self.settings.snapshot_every;
        let ordinal = record.generation + 1;
        if k > 0 && (ordinal == 1 || ordinal.is_multiple_of(k)) {
            let path = self.settings.path(&format!("perturbation_gen{ordinal:03}.png"));
            export_perturbation_image(&population.chromosomes[best], self.norm, path)?;
        }
        Ok(())
    }
}

/// Runs (or resumes) an attack and writes every artifact of the run
/// directory. I/O failures mid-run leave the last checkpoint in place.
pub fn run_attack<T, O, D>(engine: Engine<T>, oracle: &O, data: &D, settings: &AttackSettings) -> Result<RunResult<T>>
where
    T: Scalar,
    O: ClassifierOracle<T> + ?Sized,
    D: BatchProvider<T> + ?Sized,
{
    let dir = &settings.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let summary = settings.path(SUMMARY_FILE);
    if summary.exists() && !settings.force {
        return Err(Error::Config(format!(
            "{} already holds a completed run; pass --force to overwrite",
            dir.display()
        )));
    }
    if data.image_shape() != engine.bounds().shape() || oracle.input_shape() != engine.bounds().shape() {
        return Err(Error::shape(
            engine.bounds().shape(),
            format!("data {} / oracle {}", data.image_shape(), oracle.input_shape()),
        ));
    }
    let metrics = settings.path(METRICS_FILE);
    let checkpoint_path = settings.path(CHECKPOINT_FILE);
    let resume_from = if settings.resume && !summary.exists() && checkpoint_path.exists() {
        Some(Checkpoint::<T>::load(&checkpoint_path)?)
    } else {
        None
    };
    for stale in [SUMMARY_FILE, PERTURBATION_FILE] {
        remove_if_exists(&settings.path(stale))?;
    }

    let norm = *engine.normalization();
    let every = engine.config().checkpoint_every;
    let engine = engine.with_checkpoints(&checkpoint_path, every);
    let mut observer = RunObserver {
        sink: MetricsSink::new(&metrics),
        norm: &norm,
        settings,
    };
    let outcome = match resume_from {
        Some(cp) => {
            truncate_metrics(&metrics, cp.population.generation)?;
            log::info!("resuming at generation {}", cp.population.generation);
            engine.resume(cp, oracle, data, &mut observer)
        }
        None => {
            remove_if_exists(&metrics)?;
            remove_if_exists(&checkpoint_path)?;
            engine.run(oracle, data, &mut observer)
        }
    };
    let result = outcome.map_err(|f| f.error)?;

    save_perturbation(&result.best, settings.path(PERTURBATION_FILE))?;
    export_perturbation_image(&result.best, &norm, settings.path("perturbation.png"))?;
    let history = read_records(&metrics)?;
    write_convergence_svg(&history, settings.path("convergence.svg"))?;
    let batch = data.batch_for_generation(0, engine.config().batch_rotation_period)?;
    let cols = settings.grid_cols.max(1);
    let rows = settings.grid_rows.min(batch.len() / cols).max(1);
    if rows * cols <= batch.len() {
        export_attack_grid(&batch, &result.best, &norm, settings.path("attack_grid.png"), rows, cols)?;
    }

    let r = &result.best_report;
    let to_f64 = |v: [T; 3]| v.map(|x| x.to_f64_lossy());
    let record = RunSummary {
        termination_reason: result.termination_reason.to_string(),
        generations: history.len(),
        final_gamma: r.gamma.to_f64_lossy(),
        final_l2_255: r.l2_255.to_f64_lossy(),
        final_mse_255: r.mse_255.to_f64_lossy(),
        final_epsilon: r.epsilon.to_f64_lossy(),
        final_net_fitness: r.net_fitness.to_f64_lossy(),
        mean: to_f64(norm.mean),
        std: to_f64(norm.std),
        config: engine.config().clone(),
    };
    let json = serde_json::to_string_pretty(&record).expect("summary serializes");
    std::fs::write(&summary, json + "\n").map_err(|e| Error::io(&summary, e))?;
    Ok(result)
}

fn remove_if_exists(path: &Path) -> Result<()> {
    match std::fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(Error::io(path, e)),
        _ => Ok(()),
    }
}

/// Drops rows at or after `generation`, which a resumed run will rewrite.
fn truncate_metrics(path: &Path, generation: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let kept: Vec<_> = read_records(path)?.into_iter().filter(|r| r.generation < generation).collect();
    remove_if_exists(path)?;
    let sink = MetricsSink::new(path);
    kept.iter().try_for_each(|r| sink.append(r))?;
    if kept.is_empty() {
        std::fs::write(path, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Per-pixel bounds from the first `sample_batches` batches. Returns the
/// bounds and the number of batches actually used, which is smaller when the
/// dataset has fewer batches.
pub fn estimate_bounds<T: Scalar>(
    source: &DatasetSource<T>,
    sample_batches: usize,
) -> Result<(PerturbationBounds<T>, usize)> {
    let used = sample_batches.clamp(1, source.num_batches());
    let mut acc = BoundsAccumulator::new(source.image_shape());
    for b in 0..used {
        acc.push_batch(&source.batch(b)?)?;
    }
    Ok((acc.finish()?, used))
}

/// Clean versus attacked accuracy of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub images: usize,
    pub clean_accuracy: f64,
    pub attacked_accuracy: f64,
    pub drop: f64,
}

/// Accuracy on every image of `source` with and without `delta`. Both must
/// use the oracle's normalization.
pub fn evaluate_perturbation<T, O>(
    model: &str,
    oracle: &O,
    source: &DatasetSource<T>,
    delta: &Perturbation<T>,
) -> Result<EvalRow>
where
    T: Scalar,
    O: ClassifierOracle<T> + ?Sized,
{
    if delta.shape() != oracle.input_shape() || source.image_shape() != oracle.input_shape() {
        return Err(Error::shape(
            format!("{model} input {}", oracle.input_shape()),
            format!("perturbation {} / images {}", delta.shape(), source.image_shape()),
        ));
    }
    let norm = source.normalization();
    let (mut clean, mut attacked) = (0.0, 0.0);
    for b in 0..source.num_batches() {
        let batch = source.batch(b)?;
        let n = batch.len() as f64;
        clean += accuracy(oracle, &batch)?.to_f64_lossy() * n;
        attacked += accuracy(oracle, &apply_perturbation(&batch, delta, norm)?)?.to_f64_lossy() * n;
    }
    let images = source.len();
    let (clean, attacked) = (clean / images as f64, attacked / images as f64);
    Ok(EvalRow {
        model: model.to_string(),
        images,
        clean_accuracy: clean,
        attacked_accuracy: attacked,
        drop: clean - attacked,
    })
}

pub fn write_eval_csv(rows: &[EvalRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}
