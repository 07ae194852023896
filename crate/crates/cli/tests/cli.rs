//! Drives the `abnn` binary end to end on tiny configurations.

use std::path::Path;
use std::process::{Command, Output};

fn abnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_abnn")).args(args).output().expect("binary runs")
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.json");
    std::fs::write(
        &path,
        r#"{
  "experiment": "regress_1d",
  "hidden": [8, 8],
  "inference_hidden": [8],
  "meta_size": 3,
  "eval_samples": 10,
  "mc_samples": 2,
  "data": {"test_tasks": 2, "grid_points": 30},
  "train": {"max_epochs": 10, "early_stop_start": 5, "patience": 3, "smoothing": 3}
}"#,
    )
    .unwrap();
    path.display().to_string()
}

#[test]
fn train_then_reuse_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let train_out = dir.path().join("train");
    let out = abnn(&["train", "--config", &config, "--out", train_out.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = train_out.join("model.ckpt");
    assert!(ckpt.exists());
    assert!(train_out.join("history.csv").exists());

    let inspect = abnn(&["inspect-checkpoint", ckpt.to_str().unwrap()]);
    assert!(inspect.status.success());
    assert!(String::from_utf8_lossy(&inspect.stdout).contains("regress_1d/apovi"));

    let eval_out = dir.path().join("eval");
    let out = abnn(&[
        "regress-1d",
        "--config",
        &config,
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for file in ["predictions.csv", "regression.svg", "metrics_raw.csv", "metrics_aggregate.csv"] {
        assert!(eval_out.join(file).exists(), "missing {file}");
    }
}

#[test]
fn checkpoint_for_another_model_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let train_out = dir.path().join("train");
    assert!(abnn(&["train", "--config", &config, "--out", train_out.to_str().unwrap()]).status.success());
    let out = abnn(&[
        "regress-1d",
        "--config",
        &config,
        "--model",
        "cnp",
        "--checkpoint",
        train_out.join("model.ckpt").to_str().unwrap(),
        "--out",
        dir.path().join("cnp").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("regress_1d/apovi"));
}

#[test]
fn bad_config_fails_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"experiment": "regress_1d", "hiden": [4]}"#).unwrap();
    let out = abnn(&["regress-1d", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hiden"));

    let out = abnn(&["complete-image", "--model", "povi"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
}

#[test]
fn corrupt_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("junk.ckpt");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    let out = abnn(&["inspect-checkpoint", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}
