use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name).canonicalize().unwrap()
}

fn cogsl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cogsl")).args(args).output().expect("binary runs")
}

/// Writes a wine config with a short schedule into `dir`.
fn wine_config(dir: &Path) -> PathBuf {
    let path = dir.join("wine.json");
    let cfg = serde_json::json!({ "dataset": data("wine"), "train": { "iterations": 3 } });
    fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn missing_config_is_a_usage_error() {
    let o = cogsl(&["train", "--config", "/nonexistent/config.json"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gradcheck_passes_and_corruption_fails() {
    let ok = cogsl(&["gradcheck"]);
    assert_eq!(code(&ok), 0);
    let report = String::from_utf8_lossy(&ok.stdout);
    for op in cogsl::ndiff::OP_NAMES {
        assert!(report.contains(op), "report does not list {op}");
    }
    assert_eq!(code(&cogsl(&["gradcheck", "--corrupt", "1.01"])), 1);
}

#[test]
fn train_writes_logs_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = wine_config(dir.path());
    let out = dir.path().join("out");
    let args = ["train", "--config", cfg.to_str().unwrap(), "--seed", "0..1", "--output", out.to_str().unwrap(), "--baseline"];
    let o = cogsl(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics_seed0.jsonl", "metrics_seed1.jsonl", "checkpoint_seed0.bin", "report.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let log = fs::read_to_string(out.join("metrics_seed0.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let runs = report["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    let micro: Vec<f64> = runs.iter().map(|r| r["test"]["f1_micro"].as_f64().unwrap()).collect();
    let mean = report["summary"]["f1_micro"]["mean"].as_f64().unwrap();
    assert!((mean - (micro[0] + micro[1]) / 2.0).abs() < 1e-12);

    let e = cogsl(&["eval", "--config", cfg.to_str().unwrap(), "--checkpoint", out.join("checkpoint_seed0.bin").to_str().unwrap()]);
    assert_eq!(code(&e), 0, "{}", String::from_utf8_lossy(&e.stderr));
}

#[test]
fn repeated_training_logs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = wine_config(dir.path());
    let mut logs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = cogsl(&["train", "--config", cfg.to_str().unwrap(), "--seed", "5", "--output", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0);
        logs.push(fs::read(out.join("metrics_seed5.jsonl")).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn attack_rate_outside_grid_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = wine_config(dir.path());
    let o = cogsl(&["attack", "--config", cfg.to_str().unwrap(), "--attack", "edge_delete", "--rates", "0.07", "--seed", "0"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("allow_any_rate"));
}

#[test]
fn bad_override_and_unknown_sweep_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = wine_config(dir.path());
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&cogsl(&["train", "--config", c, "--set", "no_equals_sign"])), 2);
    assert_eq!(code(&cogsl(&["sweep", "--config", c, "--param", "nonsense", "--values", "1"])), 2);
}

#[test]
fn single_value_sweep_is_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = wine_config(dir.path());
    let out = dir.path().join("out");
    let o = cogsl(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--param",
        "eta",
        "--values",
        "0",
        "--seed",
        "0",
        "--output",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("sweep_eta.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "{csv}");
}
