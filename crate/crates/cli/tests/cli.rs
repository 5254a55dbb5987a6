use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;
use uap_core::data::DatasetSource;
use uap_core::io::{load_bounds, save_perturbation};
use uap_core::{ImageShape, NormalizationSpec, Perturbation};

fn uap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uap"))
        .args(args)
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// `uap synth` output with the stock settings.
struct Toy {
    _dir: TempDir,
    root: PathBuf,
}

impl Toy {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let root = dir.path().to_path_buf();
        let out = uap(&["synth", "--out", s(&root)]);
        assert!(out.status.success(), "{}", stderr(&out));
        Self { _dir: dir, root }
    }

    fn oracle(&self) -> String {
        format!("linear:{}:{}", s(&self.root.join("oracle.uapw")), s(&self.root.join("oracle.json")))
    }

    fn manifest(&self) -> PathBuf {
        self.root.join("manifest.csv")
    }

    /// Writes the synthesized config with `max_generations` replaced.
    fn config(&self, generations: usize) -> PathBuf {
        let text = std::fs::read_to_string(self.root.join("run.toml")).unwrap();
        let text: String = text
            .lines()
            .map(|l| if l.starts_with("max_generations") { format!("max_generations = {generations}") } else { l.to_string() })
            .collect::<Vec<_>>()
            .join("\n");
        let path = self.root.join(format!("run_{generations}.toml"));
        std::fs::write(&path, text).unwrap();
        path
    }

    fn attack(&self, generations: usize, out: &Path, extra: &[&str]) -> Output {
        let config = self.config(generations);
        let (oracle, manifest) = (self.oracle(), self.manifest());
        let mut args = vec!["attack", "--config", s(&config), "--dataset", s(&manifest)];
        args.extend(["--oracle", &oracle, "--out", s(out)]);
        args.extend(extra);
        uap(&args)
    }
}

fn eval_csv(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn short_attack_writes_one_metrics_row_per_generation() {
    let toy = Toy::new();
    let out = toy.root.join("run");
    let result = toy.attack(10, &out, &[]);
    assert!(result.status.success(), "{}", stderr(&result));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().skip(1).collect();
    assert_eq!(rows.len(), 10);
    assert!(rows[9].starts_with("9,"), "{}", rows[9]);
    for f in ["perturbation.bin", "perturbation.png", "convergence.svg", "attack_grid.png", "run.json", "perturbation_gen001.png"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    assert!(String::from_utf8_lossy(&result.stdout).contains("termination: max_generations"));
}

#[test]
fn same_seed_gives_identical_metrics() {
    let toy = Toy::new();
    let (a, b) = (toy.root.join("a"), toy.root.join("b"));
    assert!(toy.attack(12, &a, &[]).status.success());
    assert!(toy.attack(12, &b, &[]).status.success());
    let read = |d: &Path| std::fs::read(d.join("metrics.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
    let c = toy.root.join("c");
    assert!(toy.attack(12, &c, &["--seed", "43"]).status.success());
    assert_ne!(read(&a), read(&c));
}

#[test]
fn completed_run_is_not_overwritten_without_force() {
    let toy = Toy::new();
    let out = toy.root.join("run");
    assert!(toy.attack(4, &out, &[]).status.success());
    let again = toy.attack(4, &out, &[]);
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("--force"), "{}", stderr(&again));
    assert!(toy.attack(4, &out, &["--force"]).status.success());
}

#[test]
fn missing_model_is_a_usage_error_naming_the_path() {
    let toy = Toy::new();
    let config = toy.config(10);
    let out = uap(&[
        "attack",
        "--config",
        s(&config),
        "--dataset",
        s(&toy.manifest()),
        "--oracle",
        "onnx:/nonexistent/resnet50.onnx:/nonexistent/resnet50.json",
        "--out",
        s(&toy.root.join("run")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("/nonexistent/resnet50.onnx"), "{}", stderr(&out));
}

#[test]
fn bad_config_key_is_a_usage_error() {
    let toy = Toy::new();
    let config = toy.root.join("bad.toml");
    std::fs::write(&config, "populaton_size = 20\n").unwrap();
    let out = uap(&[
        "attack", "--config", s(&config), "--dataset", s(&toy.manifest()), "--oracle", &toy.oracle(), "--out",
        s(&toy.root.join("run")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("populaton_size"), "{}", stderr(&out));
}

#[test]
fn eval_zero_perturbation_changes_nothing() {
    let toy = Toy::new();
    let zero = toy.root.join("zero.bin");
    save_perturbation(&Perturbation::<f32>::zeros(ImageShape::rgb(16, 16)), &zero).unwrap();
    let csv = toy.root.join("eval.csv");
    let out = uap(&[
        "eval", "--perturbation", s(&zero), "--oracle", &toy.oracle(), "--dataset", s(&toy.manifest()), "--out", s(&csv),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rows = eval_csv(&csv);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][1], "256");
    assert_eq!(rows[0][2], rows[0][3], "clean and attacked accuracy differ: {:?}", rows[0]);
    assert!(rows[0][2].parse::<f64>().unwrap() >= 0.95);
}

#[test]
fn evolved_toy_perturbation_fools_the_classifier() {
    let toy = Toy::new();
    let out = toy.root.join("run");
    let result = toy.attack(100, &out, &[]);
    assert!(result.status.success(), "{}", stderr(&result));
    let eval = uap(&[
        "eval",
        "--perturbation",
        s(&out.join("perturbation.bin")),
        "--oracle",
        &toy.oracle(),
        "--dataset",
        s(&toy.manifest()),
        "--all",
    ]);
    assert!(eval.status.success(), "{}", stderr(&eval));
    let rows = eval_csv(&out.join("eval.csv"));
    let attacked: f64 = rows[0][3].parse().unwrap();
    assert!(attacked <= 0.2, "attacked accuracy {attacked}");
}

#[cfg(feature = "onnx")]
#[test]
fn eval_runs_an_onnx_model() {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures");
    let dir = TempDir::new().unwrap();
    let shape = ImageShape::rgb(12, 12);
    let data: Vec<f32> = (0..4 * shape.len()).map(|i| ((i * 7919) % 256) as f32 / 255.0).collect();
    let source = DatasetSource::in_memory(shape, data, vec![0, 1, 2, 3], NormalizationSpec::identity(), 4).unwrap();
    let manifest = source.write_png_dataset(dir.path()).unwrap();
    let zero = dir.path().join("zero.bin");
    save_perturbation(&Perturbation::<f32>::zeros(shape), &zero).unwrap();
    let oracle = format!("onnx:{}:{}", s(&fixtures.join("tiny.onnx")), s(&fixtures.join("tiny.json")));
    let out = uap(&["eval", "--perturbation", s(&zero), "--oracle", &oracle, "--dataset", s(&manifest)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rows = eval_csv(&dir.path().join("eval.csv"));
    assert_eq!(rows[0][0], "tiny");
    assert_eq!(rows[0][2], rows[0][3]);
}

fn png_dataset(dir: &Path, pixels: &[[u8; 3]], side: usize) -> PathBuf {
    let shape = ImageShape::rgb(side, side);
    let mut data = Vec::new();
    for px in pixels {
        for v in px {
            data.extend(std::iter::repeat_n(f32::from(*v) / 255.0, side * side));
        }
    }
    let labels = vec![0; pixels.len()];
    let source = DatasetSource::in_memory(shape, data, labels, NormalizationSpec::identity(), 64).unwrap();
    source.write_png_dataset(dir).unwrap()
}

#[test]
fn bounds_of_a_constant_dataset_are_zero() {
    let dir = TempDir::new().unwrap();
    let manifest = png_dataset(dir.path(), &[[10, 200, 30]; 5], 3);
    let out_path = dir.path().join("bounds.bin");
    let out = uap(&["bounds", "--dataset", s(&manifest), "--out", s(&out_path)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let bounds = load_bounds::<f32>(&out_path).unwrap();
    assert!(bounds.upper().iter().all(|u| *u == 0.0));
}

#[test]
fn bounds_of_two_images_by_hand() {
    let dir = TempDir::new().unwrap();
    // 0.2, 0.4, 0.6 and 0.6, 0.4, 1.0 in the unit range
    let manifest = png_dataset(dir.path(), &[[51, 102, 153], [153, 102, 255]], 2);
    let out_path = dir.path().join("bounds.bin");
    let out = uap(&["bounds", "--dataset", s(&manifest), "--out", s(&out_path), "--sample-batches", "1"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let bounds = load_bounds::<f32>(&out_path).unwrap();
    // population σ of two values is half their distance, divided by the channel std
    let expected = [0.2 / 0.229, 0.0, 0.2 / 0.226];
    for (i, u) in bounds.upper().iter().enumerate() {
        let e = expected[i / 4];
        assert!((f64::from(*u) - e).abs() < 1e-5, "gene {i}: {u} vs {e}");
    }
}

#[test]
fn bounds_warns_when_sampling_more_batches_than_exist() {
    let dir = TempDir::new().unwrap();
    let manifest = png_dataset(dir.path(), &[[0, 0, 0], [255, 255, 255], [9, 9, 9]], 2);
    let out_path = dir.path().join("bounds.bin");
    let out = uap(&["bounds", "--dataset", s(&manifest), "--out", s(&out_path), "--sample-batches", "8"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stderr(&out).contains("exceeds the 1 batch(es) available"), "{}", stderr(&out));
}

#[test]
fn invalid_thread_count_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_uap"))
        .args(["synth", "--out", "/tmp/unused"])
        .env("UAP_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
