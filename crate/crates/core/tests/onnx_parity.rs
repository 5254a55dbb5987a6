//! Logits from the built-in ONNX interpreter against PyTorch.
#![cfg(feature = "onnx")]

use std::path::{Path, PathBuf};

use serde::Deserialize;
use uap_core::oracle::{load_onnx_oracle, ClassifierOracle, PreprocessingDescriptor};

#[derive(Deserialize)]
struct Expected {
    input: Vec<f32>,
    n: usize,
    logits: Vec<f32>,
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

/// Largest absolute logit difference and the largest reference magnitude.
fn max_deviation(model: &Path, meta: &Path, expected: &Path) -> (f32, f32) {
    let meta = PreprocessingDescriptor::load(meta).unwrap();
    let expected: Expected = serde_json::from_str(&std::fs::read_to_string(expected).unwrap()).unwrap();
    let oracle = load_onnx_oracle::<f32>(model, &meta).unwrap();
    assert_eq!(oracle.num_classes() * expected.n, expected.logits.len());
    let got = oracle.logits(&expected.input, expected.n).unwrap();
    let dev = got.iter().zip(&expected.logits).map(|(g, e)| (g - e).abs()).fold(0.0, f32::max);
    (dev, expected.logits.iter().map(|e| e.abs()).fold(0.0, f32::max))
}

#[test]
fn tiny_model_matches_pytorch() {
    let (dev, _) = max_deviation(&fixture("tiny.onnx"), &fixture("tiny.json"), &fixture("tiny_expected.json"));
    assert!(dev <= 1e-4, "max |Δlogit| = {dev}");
}

#[test]
fn f64_oracle_agrees_with_f32() {
    let meta = PreprocessingDescriptor::load(fixture("tiny.json")).unwrap();
    let expected: Expected =
        serde_json::from_str(&std::fs::read_to_string(fixture("tiny_expected.json")).unwrap()).unwrap();
    let oracle = load_onnx_oracle::<f64>(fixture("tiny.onnx"), &meta).unwrap();
    let input: Vec<f64> = expected.input.iter().map(|v| f64::from(*v)).collect();
    let got = oracle.logits(&input, expected.n).unwrap();
    for (g, e) in got.iter().zip(&expected.logits) {
        assert!((g - f64::from(*e)).abs() <= 1e-4);
    }
}

/// Full-size check, run when `UAP_PARITY_DIR` holds `<name>.onnx`,
/// `<name>.json` and `<name>_expected.json` for each name in `UAP_PARITY_MODELS`.
#[test]
fn exported_models_match_pytorch() {
    let (Ok(dir), Ok(names)) = (std::env::var("UAP_PARITY_DIR"), std::env::var("UAP_PARITY_MODELS")) else {
        eprintln!("UAP_PARITY_DIR / UAP_PARITY_MODELS not set; skipping");
        return;
    };
    let dir = PathBuf::from(dir);
    for name in names.split(',') {
        let started = std::time::Instant::now();
        let (dev, scale) = max_deviation(
            &dir.join(format!("{name}.onnx")),
            &dir.join(format!("{name}.json")),
            &dir.join(format!("{name}_expected.json")),
        );
        eprintln!("{name}: max |Δlogit| = {dev:.2e}, max |logit| = {scale:.3} ({:.1}s)", started.elapsed().as_secs_f64());
        assert!(dev <= 1e-4 * scale.max(1.0), "{name}: max |Δlogit| = {dev} at scale {scale}");
    }
}
