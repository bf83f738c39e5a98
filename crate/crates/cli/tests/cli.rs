use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_anchor-moe"))
}

fn boston() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/boston.csv")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

/// A small, fast benchmark configuration.
fn quick(out: &Path) -> Vec<String> {
    [
        "--data",
        boston().to_str().unwrap(),
        "--n-runs",
        "2",
        "--subsample",
        "200",
        "--epochs",
        "15",
        "--out",
        out.to_str().unwrap(),
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["rates", "--alpha", "1.5"]).status.code(), Some(1));
    assert_eq!(run(&["benchmark", "--n-runs", "0", "--data", "x.csv"]).status.code(), Some(1));
    let missing = run(&["benchmark", "--data", "/nonexistent/data.csv"]);
    assert_eq!(missing.status.code(), Some(2), "{}", text(&missing));
    assert_eq!(run(&["benchmark"]).status.code(), Some(1));
}

#[test]
fn benchmark_writes_reports_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a");
    let o = bin().arg("benchmark").args(quick(&first)).output().unwrap();
    assert!(o.status.success(), "{}", text(&o));
    for f in ["config.json", "runs.csv", "aggregate.csv", "aggregate.json"] {
        assert!(first.join(f).is_file(), "missing {f}");
    }
    for f in ["report.json", "plan.json", "phase1.csv", "phase2.csv"] {
        assert!(first.join("runs/seed_0").join(f).is_file(), "missing run file {f}");
    }
    assert!(!first.join("failures.json").exists());
    let agg = std::fs::read_to_string(first.join("aggregate.csv")).unwrap();
    assert!(agg.contains("nll") && agg.contains("rmse"), "{agg}");

    let second = dir.path().join("b");
    let o = run(&[
        "benchmark",
        "--config",
        first.join("config.json").to_str().unwrap(),
        "--out",
        second.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(
        std::fs::read(first.join("aggregate.csv")).unwrap(),
        std::fs::read(second.join("aggregate.csv")).unwrap()
    );
}

#[test]
fn tampered_data_hash_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    let o = bin().arg("benchmark").args(quick(&out)).output().unwrap();
    assert!(o.status.success(), "{}", text(&o));
    let copy = dir.path().join("boston.csv");
    let mut body = std::fs::read_to_string(boston()).unwrap();
    body = body.replacen("24.0", "24.5", 1);
    std::fs::write(&copy, body).unwrap();
    let cfg = std::fs::read_to_string(out.join("config.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&cfg).unwrap();
    v["data"] = serde_json::Value::String(copy.to_string_lossy().into_owned());
    let cfg_path = dir.path().join("edited.json");
    std::fs::write(&cfg_path, v.to_string()).unwrap();
    let o = run(&["benchmark", "--config", cfg_path.to_str().unwrap(), "--out", dir.path().join("c").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
}

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("train");
    let o = bin().arg("train").args(quick(&out)).output().unwrap();
    assert!(o.status.success(), "{}", text(&o));
    assert!(out.join("model.json").is_file());
    let eval_out = dir.path().join("eval");
    let o = run(&[
        "eval",
        "--model",
        out.join("model.json").to_str().unwrap(),
        "--data",
        boston().to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o));
    let preds = std::fs::read_to_string(eval_out.join("predictions.csv")).unwrap();
    assert!(preds.starts_with("row,y,mean,raw_mean,z_mean,z_sd,q025,q975"));
    assert_eq!(preds.lines().count(), 507);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_out.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["rmse"].as_f64().unwrap() > 0.0);
}

#[test]
fn rates_outputs_slopes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "rates",
        "--d",
        "1",
        "--n-functions",
        "2",
        "--out",
        dir.path().to_str().unwrap(),
        "--format",
        "json",
    ]);
    assert!(o.status.success(), "{}", text(&o));
    let slopes = std::fs::read_to_string(dir.path().join("slopes.csv")).unwrap();
    assert!(slopes.starts_with("experiment,slope,stderr,target"), "{slopes}");
    let rates = std::fs::read_to_string(dir.path().join("rates.csv")).unwrap();
    assert_eq!(rates.lines().count(), 1 + 6);
    let printed: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(printed.is_array() || printed.is_object());
}

#[test]
fn toy_demo_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "toy-demo",
        "--n",
        "200",
        "--holdout",
        "300",
        "--grid",
        "50",
        "--epochs",
        "20",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", text(&o));
    for f in ["band.csv", "train.csv", "snapshots.csv", "summary.json"] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    let band = std::fs::read_to_string(dir.path().join("band.csv")).unwrap();
    assert_eq!(band.lines().count(), 51);
    let s: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    let cov = s["coverage"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&cov));
}
