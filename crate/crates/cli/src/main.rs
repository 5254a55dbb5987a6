//! `uap`: attack runs, cross-model evaluation and bounds estimation.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod config;

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use uap_core::attack::{
    estimate_bounds, evaluate_perturbation, run_attack, write_eval_csv, AttackSettings, EvalRow, RunSummary,
    SUMMARY_FILE,
};
use uap_core::data::{load_dataset, synthetic_dataset, DatasetOptions, DatasetSource, ReadAhead, SyntheticSpec};
use uap_core::ga::Engine;
use uap_core::io::{load_bounds, load_perturbation, save_bounds};
use uap_core::oracle::{load_linear_oracle, ClassifierOracle, PreprocessingDescriptor};
use uap_core::{Error, NormalizationSpec};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "uap", version, about = "Universal adversarial perturbations via genetic search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evolve a perturbation against one classifier.
    Attack(AttackArgs),
    /// Measure clean and attacked accuracy of one or more classifiers.
    Eval(EvalArgs),
    /// Estimate per-pixel perturbation bounds from a dataset.
    Bounds(BoundsArgs),
    /// Write a seeded synthetic dataset, its classifier and a matching run config.
    Synth(SynthArgs),
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    config: PathBuf,
    /// CSV manifest with header `path,label`.
    #[arg(long)]
    dataset: PathBuf,
    /// `onnx:MODEL.onnx:META.json` or `linear:WEIGHTS.bin[:META.json]`.
    #[arg(long)]
    oracle: String,
    #[arg(long)]
    out: PathBuf,
    /// Overrides `rng_seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite a completed run in the output directory.
    #[arg(long)]
    force: bool,
    /// Continue an interrupted run from its last checkpoint.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    perturbation: PathBuf,
    /// Repeat for each model to evaluate.
    #[arg(long = "oracle", required = true)]
    oracles: Vec<String>,
    #[arg(long)]
    dataset: PathBuf,
    /// Number of leading manifest images to evaluate.
    #[arg(long, default_value_t = 512)]
    n: usize,
    /// Evaluate the whole manifest instead of the first `n` images.
    #[arg(long, conflicts_with = "n")]
    all: bool,
    /// Defaults to `eval.csv` next to the perturbation file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BoundsArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 8)]
    sample_batches: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Preprocessing descriptor whose mean/std define the normalized domain.
    #[arg(long)]
    meta: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 256)]
    n: usize,
    /// Image height and width.
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => m,
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn usage(e: impl Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime(e: impl Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let outcome = configure_threads().and_then(|()| match cli.command {
        Command::Attack(args) => cmd_attack(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Bounds(args) => cmd_bounds(args),
        Command::Synth(args) => cmd_synth(args),
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("UAP_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| usage(format!("UAP_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(runtime)
}

struct LoadedOracle {
    name: String,
    oracle: Box<dyn ClassifierOracle<f32>>,
    normalization: Option<NormalizationSpec<f32>>,
}

fn existing(path: &str, what: &str) -> CliResult<PathBuf> {
    let path = PathBuf::from(path);
    if path.is_file() {
        Ok(path)
    } else {
        Err(usage(format!("{what} not found: {}", path.display())))
    }
}

fn load_oracle(spec: &str) -> CliResult<LoadedOracle> {
    let parts: Vec<&str> = spec.splitn(3, ':').collect();
    let bad = || usage(format!("oracle spec {spec:?} must be onnx:MODEL:META or linear:WEIGHTS[:META]"));
    let (kind, model) = match parts.as_slice() {
        [kind, model, ..] if !model.is_empty() => (*kind, existing(model, "model file")?),
        _ => return Err(bad()),
    };
    let meta = match parts.get(2) {
        Some(m) => Some(PreprocessingDescriptor::load(existing(m, "descriptor")?).map_err(usage)?),
        None => None,
    };
    let name = model.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| spec.to_string());
    let oracle: Box<dyn ClassifierOracle<f32>> = match kind {
        "linear" => Box::new(load_linear_oracle::<f32>(&model).map_err(usage)?),
        "onnx" => load_onnx(&model, meta.as_ref().ok_or_else(bad)?)?,
        _ => return Err(bad()),
    };
    let normalization = meta.as_ref().map(|m| m.normalization()).transpose().map_err(usage)?;
    if let Some(m) = &meta {
        if m.input_shape() != oracle.input_shape() {
            return Err(usage(format!(
                "{name}: descriptor input_size {:?} disagrees with model input {}",
                m.input_size,
                oracle.input_shape()
            )));
        }
    }
    Ok(LoadedOracle { name, oracle, normalization })
}

#[cfg(feature = "onnx")]
fn load_onnx(model: &Path, meta: &PreprocessingDescriptor) -> CliResult<Box<dyn ClassifierOracle<f32>>> {
    Ok(Box::new(uap_core::oracle::load_onnx_oracle(model, meta).map_err(usage)?))
}

#[cfg(not(feature = "onnx"))]
fn load_onnx(model: &Path, _meta: &PreprocessingDescriptor) -> CliResult<Box<dyn ClassifierOracle<f32>>> {
    Err(usage(format!(
        "{}: this build has no ONNX support (rebuild with the onnx feature)",
        model.display()
    )))
}

fn open_dataset(
    manifest: &Path,
    normalization: NormalizationSpec<f32>,
    batch_size: usize,
    num_classes: Option<usize>,
    shuffle_seed: Option<u64>,
) -> CliResult<DatasetSource<f32>> {
    if !manifest.is_file() {
        return Err(usage(format!("dataset manifest not found: {}", manifest.display())));
    }
    let options = DatasetOptions { normalization, batch_size, num_classes, shuffle_seed };
    load_dataset(manifest, &options).map_err(usage)
}

fn cmd_attack(args: AttackArgs) -> CliResult<()> {
    let mut cfg = RunConfig::load(&args.config).map_err(usage)?;
    if let Some(seed) = args.seed {
        cfg.ga.rng_seed = seed;
    }
    let loaded = load_oracle(&args.oracle)?;
    let from_config = match (cfg.data.mean, cfg.data.std) {
        (Some(mean), Some(std)) => Some(NormalizationSpec::from_f64(mean, std).map_err(usage)?),
        _ => None,
    };
    if loaded.normalization.is_some() && from_config.is_some() {
        log::warn!("config mean/std ignored: the oracle descriptor defines the normalization");
    }
    let norm = loaded.normalization.or(from_config).unwrap_or_default();
    let oracle = loaded.oracle;
    let dataset = open_dataset(
        &args.dataset,
        norm,
        cfg.data.batch_size,
        Some(oracle.num_classes()),
        cfg.data.shuffle_seed,
    )?;
    if dataset.image_shape() != oracle.input_shape() {
        return Err(usage(format!(
            "{}: images are {}, model expects {}",
            loaded.name,
            dataset.image_shape(),
            oracle.input_shape()
        )));
    }
    let bounds = match &cfg.data.bounds {
        Some(path) => load_bounds::<f32>(path).map_err(usage)?,
        None => {
            let (bounds, used) = estimate_bounds(&dataset, cfg.data.bounds_sample_batches).map_err(runtime)?;
            log::info!("bounds estimated from {used} batch(es)");
            bounds
        }
    };
    log::info!(
        "{} images in {} batches of {}, model {}",
        dataset.len(),
        dataset.num_batches(),
        dataset.batch_size(),
        loaded.name
    );
    let engine = Engine::new(cfg.ga.clone(), bounds, norm).map_err(usage)?;
    let settings = AttackSettings {
        force: args.force,
        resume: args.resume,
        snapshot_every: cfg.data.snapshot_every,
        ..AttackSettings::new(&args.out)
    };
    let result = run_attack(engine, &oracle, &ReadAhead::new(dataset), &settings).map_err(|e| match e {
        Error::Config(_) | Error::ShapeMismatch { .. } => usage(e),
        other => runtime(other),
    })?;
    let r = &result.best_report;
    println!("termination: {}", result.termination_reason);
    println!("generations: {}", result.history.last().map_or(0, |h| h.generation + 1));
    println!("best gamma:  {}", r.gamma);
    println!("best l2_255: {} (epsilon {})", r.l2_255, r.epsilon);
    println!("best mse:    {}", r.mse_255);
    println!("outputs:     {}", args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    let path = &args.perturbation;
    if !path.is_file() {
        return Err(usage(format!("perturbation not found: {}", path.display())));
    }
    let delta = load_perturbation::<f32>(path).map_err(usage)?;
    let summary_path = path.with_file_name(SUMMARY_FILE);
    let source_norm: NormalizationSpec<f32> = if summary_path.is_file() {
        RunSummary::load(&summary_path).and_then(|s| s.normalization()).map_err(usage)?
    } else {
        log::warn!("no {SUMMARY_FILE} beside the perturbation; assuming ImageNet normalization");
        NormalizationSpec::default()
    };
    let mut rows: Vec<EvalRow> = Vec::new();
    for spec in &args.oracles {
        let loaded = load_oracle(spec)?;
        let norm = loaded.normalization.unwrap_or(source_norm);
        if delta.shape() != loaded.oracle.input_shape() {
            return Err(usage(format!(
                "{}: perturbation is {}, model expects {}",
                loaded.name,
                delta.shape(),
                loaded.oracle.input_shape()
            )));
        }
        let dataset = open_dataset(&args.dataset, norm, 64, Some(loaded.oracle.num_classes()), None)?;
        let dataset = if args.all { dataset } else { dataset.truncated(args.n) };
        let delta = delta.renormalize(&source_norm, &norm);
        rows.push(evaluate_perturbation(&loaded.name, &loaded.oracle, &dataset, &delta).map_err(runtime)?);
    }
    let width = rows.iter().map(|r| r.model.len()).max().unwrap_or(5).max(5);
    println!("{:width$}  {:>6}  {:>8}  {:>8}  {:>7}", "model", "images", "clean", "attacked", "drop");
    for r in &rows {
        println!(
            "{:width$}  {:>6}  {:>8.4}  {:>8.4}  {:>7.4}",
            r.model, r.images, r.clean_accuracy, r.attacked_accuracy, r.drop
        );
    }
    let out = args.out.unwrap_or_else(|| path.with_file_name("eval.csv"));
    write_eval_csv(&rows, &out).map_err(runtime)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_bounds(args: BoundsArgs) -> CliResult<()> {
    if args.batch_size == 0 || args.sample_batches == 0 {
        return Err(usage("--batch-size and --sample-batches must be positive"));
    }
    let norm = match &args.meta {
        Some(m) => {
            let path = existing(&m.to_string_lossy(), "descriptor")?;
            PreprocessingDescriptor::load(path).and_then(|d| d.normalization()).map_err(usage)?
        }
        None => NormalizationSpec::default(),
    };
    let dataset = open_dataset(&args.dataset, norm, args.batch_size, None, None)?;
    let (bounds, used) = estimate_bounds(&dataset, args.sample_batches).map_err(runtime)?;
    if used < args.sample_batches {
        log::warn!(
            "--sample-batches {} exceeds the {} batch(es) available; using the whole dataset",
            args.sample_batches,
            used
        );
    }
    save_bounds(&bounds, &args.out).map_err(runtime)?;
    let plane = bounds.shape().pixels();
    let mean_px = bounds
        .upper()
        .iter()
        .enumerate()
        .map(|(i, u)| norm.delta_to_pixel(i / plane, *u) as f64)
        .sum::<f64>()
        / bounds.upper().len() as f64;
    println!(
        "bounds for {} from {} image(s): mean half-width {:.3} (0-255 scale); wrote {}",
        bounds.shape(),
        (used * args.batch_size).min(dataset.len()),
        mean_px,
        args.out.display()
    );
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> CliResult<()> {
    let spec = SyntheticSpec {
        num_classes: args.classes,
        n: args.n,
        image_size: (args.size, args.size),
        seed: args.seed,
    };
    let norm = NormalizationSpec::<f32>::default();
    let (source, oracle) = synthetic_dataset(&spec, norm, 64).map_err(usage)?;
    std::fs::create_dir_all(&args.out).map_err(|e| runtime(format!("{}: {e}", args.out.display())))?;
    let manifest = source.write_png_dataset(&args.out).map_err(runtime)?;
    let weights = args.out.join("oracle.uapw");
    oracle.save(&weights).map_err(runtime)?;
    let descriptor = PreprocessingDescriptor {
        input_name: "input".into(),
        output_name: "logits".into(),
        mean: norm.mean.map(f64::from),
        std: norm.std.map(f64::from),
        input_size: [args.size, args.size],
    };
    let meta = args.out.join("oracle.json");
    write_text(&meta, serde_json::to_string_pretty(&descriptor).map_err(runtime)? + "\n")?;
    let mut cfg = RunConfig::default();
    cfg.ga.population_size = 20;
    cfg.ga.max_generations = 100;
    cfg.ga.eps_start = 60.0;
    cfg.ga.eps_end = 25.0;
    cfg.ga.rng_seed = args.seed;
    let run = args.out.join("run.toml");
    write_text(&run, cfg.to_toml())?;
    println!("wrote {}, {}, {} and {}", manifest.display(), weights.display(), meta.display(), run.display());
    println!(
        "next: uap attack --config {} --dataset {} --oracle linear:{}:{} --out <dir>",
        run.display(),
        manifest.display(),
        weights.display(),
        meta.display()
    );
    Ok(())
}

fn write_text(path: &Path, text: String) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))
}
