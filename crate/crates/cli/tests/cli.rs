use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ccf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccf"))
        .args(args)
        .output()
        .expect("ccf binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SIM: &str = r#"{"num_users": 30, "num_items": 120, "d_star": 4,
    "interactions_per_user": 12, "test_per_user": 8, "seed": 1}"#;
const TRAIN: &str = r#"{"model_type": "mf", "dim": 8, "epochs": 4, "pretrain_epochs": 2,
    "learning_rate": 0.05, "rule": "D1", "clone_rounds": 1}"#;

/// Simulated logs split under the randomized-trial protocol.
fn fixture(root: &Path) -> PathBuf {
    fs::write(root.join("sim.json"), SIM).unwrap();
    let sim = root.join("sim");
    assert!(
        ccf(&["simulate", "--config", s(&root.join("sim.json")), "--out", s(&sim)])
            .status
            .success()
    );
    let split = root.join("split");
    let out = ccf(&[
        "split",
        "--input",
        s(&sim.join("observational.tsv")),
        "--test",
        s(&sim.join("randomized.tsv")),
        "--out",
        s(&split),
        "--seed",
        "4",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    split
}

#[test]
fn train_then_eval_writes_checkpoint_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let split = fixture(dir.path());
    fs::write(dir.path().join("train.json"), TRAIN).unwrap();
    let model = dir.path().join("run/model.json");
    let out = ccf(&[
        "train",
        "--config",
        s(&dir.path().join("train.json")),
        "--data",
        s(&split),
        "--out",
        s(&model),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(model.exists());
    let trace = fs::read_to_string(dir.path().join("run/trace.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("epoch,rank_loss,constraint_loss"));
    assert_eq!(trace.lines().count(), 5);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["command"], "train");

    let out = ccf(&["eval", "--model", s(&model), "--data", s(&split), "--partition", "test"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/metrics.json")).unwrap()).unwrap();
    for key in ["ndcg@10", "hit@1", "num_users", "model", "partition", "seed"] {
        assert!(metrics.get(key).is_some(), "missing {key}");
    }
    assert_eq!(metrics["partition"], "test");
    assert_eq!(metrics["seed"], 4);
}

#[test]
fn invalid_rule_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let split = fixture(dir.path());
    fs::write(dir.path().join("bad.json"), r#"{"rule": "R2"}"#).unwrap();
    let out = ccf(&[
        "train",
        "--config",
        s(&dir.path().join("bad.json")),
        "--data",
        s(&split),
        "--out",
        s(&dir.path().join("m.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("'R2'"), "{err}");
    for rule in ["none", "K1", "D1", "R1r", "R1n", "C"] {
        assert!(err.contains(rule), "{err}");
    }
}

#[test]
fn usage_and_runtime_failures_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("unknown.json"), r#"{"learning_rat": 0.1}"#).unwrap();
    fs::write(dir.path().join("ok.json"), "{}").unwrap();
    let missing = dir.path().join("missing");
    let out = ccf(&[
        "train",
        "--config",
        s(&dir.path().join("unknown.json")),
        "--data",
        s(&missing),
        "--out",
        "m.json",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = ccf(&[
        "train",
        "--config",
        s(&dir.path().join("ok.json")),
        "--data",
        s(&missing),
        "--out",
        "m.json",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(ccf(&["eval", "--model", "m.json"]).status.code(), Some(2));
    assert_eq!(ccf(&["frobnicate"]).status.code(), Some(2));
    let out = ccf(&["eval", "--model", "m.json", "--data", "d", "--partition", "train"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_writes_one_row_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let split = fixture(dir.path());
    let cfg = format!(r#"{{"base": {TRAIN}, "grid": {{"omega": [0.001, 0.1, 0.5, 1.0]}}}}"#);
    fs::write(dir.path().join("sweep.json"), cfg).unwrap();
    let out_dir = dir.path().join("sweep");
    let out = ccf(&[
        "sweep",
        "--config",
        s(&dir.path().join("sweep.json")),
        "--data",
        s(&split),
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    let best: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("best.json")).unwrap()).unwrap();
    assert!(best.get("config").is_some());
    assert!(out_dir.join("report.csv").exists());
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut artifacts = Vec::new();
    for dir in [a.path(), b.path()] {
        let split = fixture(dir);
        fs::write(dir.join("train.json"), TRAIN).unwrap();
        let model = dir.join("model.json");
        assert!(ccf(&[
            "train",
            "--config",
            s(&dir.join("train.json")),
            "--data",
            s(&split),
            "--out",
            s(&model)
        ])
        .status
        .success());
        let metrics = dir.join("metrics.json");
        let out = ccf(&[
            "eval",
            "--model",
            s(&model),
            "--data",
            s(&split),
            "--partition",
            "validation",
            "--out",
            s(&metrics),
        ]);
        assert!(out.status.success());
        artifacts.push(
            [
                "sim/observational.tsv",
                "sim/randomized.tsv",
                "sim/world.json",
                "split/train.tsv",
                "split/meta.json",
                "model.json",
                "trace.csv",
                "metrics.json",
            ]
            .map(|f| fs::read(dir.join(f)).unwrap()),
        );
    }
    assert_eq!(artifacts[0], artifacts[1]);
}

#[test]
fn mostpop_keyword_evaluates_the_popularity_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let split = fixture(dir.path());
    let out_file = dir.path().join("pop.json");
    let out = ccf(&[
        "eval",
        "--model",
        "mostpop",
        "--data",
        s(&split),
        "--partition",
        "test",
        "--out",
        s(&out_file),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(out_file).unwrap()).unwrap();
    assert_eq!(metrics["model"], "mostpop");
}
