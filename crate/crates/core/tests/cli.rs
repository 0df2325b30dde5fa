//! End-to-end runs of the `mever` binary.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: [&str; 12] = [
    "--set", "hidden=8", "--set", "heads=2", "--set", "max_text_len=16", "--set", "max_positions=24", "--set",
    "max_explanation_len=8", "--set", "batch_size=4",
];

fn mever(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mever"))
        .args(args)
        .current_dir(dir)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .env_remove("MEVER_DATA_DIR")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let mut all = args.to_vec();
    all.extend(SMALL);
    let out = mever(dir, &all);
    assert!(
        out.status.success(),
        "mever {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synth(dir: &Path) {
    ok(dir, &["synth", "--seed", "7", "--claims", "16", "--image-size", "8", "--out", "data"]);
}

#[test]
fn synth_train_evaluate_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    ok(dir, &["train-retriever", "--data", "data", "--out", "run", "--set", "max_epochs=2"]);
    let text = ok(dir, &["evaluate", "--data", "data", "--out", "run", "--split", "test"]);
    assert!(text.contains("map"), "{text}");
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("run/report.json")).unwrap()).unwrap();
    let map = report["retrieval"]["map"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));
}

#[test]
fn joint_pipeline_with_both_settings_and_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth(dir);
    ok(dir, &["train-retriever", "--data", "data", "--out", "run", "--set", "max_epochs=2"]);
    ok(dir, &["build-index", "--data", "data", "--out", "run"]);
    ok(dir, &["retrieve", "--data", "data", "--out", "run"]);
    let retrieved = std::fs::read_to_string(dir.join("run/retrieved.jsonl")).unwrap();
    assert_eq!(retrieved.lines().count(), 16);
    for line in retrieved.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["evidence"].as_array().unwrap().len(), 3);
    }
    ok(dir, &["train-joint", "--data", "data", "--out", "run", "--set", "joint_max_epochs=2"]);
    for setting in ["gold", "retrieved"] {
        ok(dir, &["evaluate", "--data", "data", "--out", "run", "--split", "test", "--setting", setting]);
        let report = std::fs::read_to_string(dir.join("run/report.json")).unwrap();
        assert!(report.contains(&format!("\"{setting}\"")), "{report}");
        assert!(report.contains("macro_f1"));
    }

    ok(dir, &["predict", "--data", "data", "--out", "run", "--split", "all"]);
    let text = std::fs::read_to_string(dir.join("run/predictions.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 16);
    for line in text.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v["claim_id"].is_string());
        assert!(["SUPPORT", "REFUTE"].contains(&v["predicted_label"].as_str().unwrap()));
        assert!(v["explanation"].is_string());
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["claim_id", "explanation", "predicted_label"]);
    }

    // Re-running a subcommand reproduces its output file.
    let first = std::fs::read(dir.join("run/predictions.jsonl")).unwrap();
    ok(dir, &["predict", "--data", "data", "--out", "run", "--split", "all"]);
    assert_eq!(std::fs::read(dir.join("run/predictions.jsonl")).unwrap(), first);

    ok(dir, &["report", "--data", "data", "--out", "run", "--split", "test"]);
    let csv = std::fs::read_to_string(dir.join("run/metric_vs_k.csv")).unwrap();
    assert!(csv.lines().count() > 1);
}

#[test]
fn unknown_subcommand_exits_one_with_usage() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mever(tmp.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage") || err.contains("usage"), "{err}");
}

#[test]
fn missing_corpus_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mever(tmp.path(), &["train-retriever", "--data", "nowhere", "--out", "run"]);
    assert_eq!(out.status.code(), Some(2));
}
