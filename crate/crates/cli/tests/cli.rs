#![allow(clippy::field_reassign_with_default)]

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use swagppm::data::SyntheticSpec;
use swagppm::pipeline::{DataSource, RunConfig};

fn swagppm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swagppm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write_tiny_config(dir: &Path) -> String {
    let mut cfg = RunConfig::default();
    cfg.out_dir = dir.join("out");
    cfg.data.source = DataSource::Synthetic(SyntheticSpec {
        num_classes: 8,
        total_records: 400,
        vocab_size: 200,
        ..SyntheticSpec::default()
    });
    cfg.data.hash_dim = 256;
    cfg.swag_ppm.finetune.epochs = 2;
    cfg.swag_ppm.swag.epochs = 4;
    cfg.swag_ppm.max_rank = 3;
    cfg.swag_ppm.draws = 20;
    cfg.nonprivate.phase.epochs = 3;
    cfg.dp_sgd.batch_size = 64;
    cfg.dp_sgd.epochs = 2;
    cfg.benchmark.delta_sweep = vec![1e-3, 0.5];
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_json().unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn first_line(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn generate_data_writes_dataset_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = dir.path().join("data");
    let o = swagppm(&["--config", &cfg, "--out", out.to_str().unwrap(), "generate-data"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(first_line(&out.join("dataset.csv")), "id,text,label");
    assert_eq!(first_line(&out.join("splits.csv")), "id,split");
    assert!(out.join("manifest.json").exists());
    assert!(String::from_utf8_lossy(&o.stdout).contains("400 records, 8 classes"));
}

#[test]
fn account_prints_frontier_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = swagppm(&[
        "--out",
        dir.path().to_str().unwrap(),
        "account",
        "--sampling-rate",
        "0.01",
        "--noise-multiplier",
        "1.1",
        "--steps",
        "1000",
        "--deltas",
        "1e-5,1e-3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "sampling_rate,noise_multiplier,steps,delta,epsilon,order");
    assert_eq!(lines.len(), 3);
    let eps: Vec<f64> = lines[1..].iter().map(|l| l.split(',').nth(4).unwrap().parse().unwrap()).collect();
    assert!(eps[0] > eps[1] && eps[1] > 0.0);
    assert_eq!(fs::read_to_string(dir.path().join("account.csv")).unwrap(), text);
    assert!(dir.path().join("ledger.json").exists());
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"swag_ppm": {"draws": 10, "drawz": 3}}"#).unwrap();
    let o = swagppm(&["--config", bad.to_str().unwrap(), "generate-data"]);
    assert_eq!(o.status.code(), Some(2));
    let o = swagppm(&["--override", "swag_ppm.k=1.5", "--out", dir.path().to_str().unwrap(), "swag-ppm"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(swagppm(&["no-such-command"]).status.code(), Some(2));
}

#[test]
fn phase_failures_exit_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let o = swagppm(&["--config", &cfg, "--override", "dp_sgd.target_epsilon=0.000001", "dp-sgd"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn benchmark_then_report_reproduces_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = dir.path().join("bench");
    let o = swagppm(&["--config", &cfg, "--seed", "3", "--out", out.to_str().unwrap(), "benchmark"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(first_line(&out.join("summary.csv")), "model,epsilon,delta,f1_weighted,f1_macro");
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5);
    let per_class = fs::read_to_string(out.join("per_class_f1.csv")).unwrap();
    fs::remove_file(out.join("per_class_f1.csv")).unwrap();

    let o = swagppm(&["--out", out.to_str().unwrap(), "report"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(out.join("per_class_f1.csv")).unwrap(), per_class);
    assert!(String::from_utf8_lossy(&o.stdout).contains("SWAG-PPM"));
}
