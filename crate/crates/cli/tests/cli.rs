//! Drives the `leap` binary through a toy train, plan and eval cycle.

use std::path::Path;
use std::process::{Command, Output};

const TOY: &str = "
[env]
size = 6
obstacles = 2
[data]
demos = 12
[train]
layers = 1
heads = 2
embed_dim = 16
batch = 8
epochs = 1
grid = 6
[plan]
horizon = 4
iters = 2
[eval]
episodes = 3
seeds = 0
";

fn leap(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_leap"))
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .output()
        .expect("binary runs")
}

#[test]
fn train_plan_and_eval_write_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("toy.ini");
    std::fs::write(&config, TOY).unwrap();
    let cfg = config.to_str().unwrap();

    for cmd in ["gen-data", "train", "plan", "eval"] {
        let out = leap(&[cmd, "--config", cfg], dir.path());
        assert!(out.status.success(), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["dataset0.bin", "model0.ckpt", "loss.csv", "trace.jsonl", "metrics.json", "metrics.csv"] {
        assert!(dir.path().join(file).exists(), "{file}");
    }
    let trace = std::fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 3, "initial snapshot plus two sweeps");

    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["episodes_per_seed"], 3);
}

#[test]
fn flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("toy.ini");
    std::fs::write(&config, TOY).unwrap();
    let cfg = config.to_str().unwrap();
    assert!(leap(&["train", "--config", cfg], dir.path()).status.success());
    let out = leap(
        &["eval", "--config", cfg, "--episodes", "2", "--seed", "4", "--temperature", "greedy", "--execution", "replan"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["episodes_per_seed"], 2);
    assert_eq!(metrics["per_seed"][0]["seed"], 4);
}

#[test]
fn missing_checkpoint_is_a_structured_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = leap(&["eval", "--episodes", "1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "checkpoint_missing");
}
