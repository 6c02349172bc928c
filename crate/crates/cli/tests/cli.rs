use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "train": {
    "iter_max": 4,
    "pretrain_steps": 1,
    "classes_per_batch": 4,
    "samples_per_class": 2,
    "lr_init": 0.001
  },
  "model": { "metric_hidden": [16] },
  "synthetic": {
    "num_classes": 5,
    "sketches_per_class": 6,
    "shapes_per_class": 3,
    "latent_dim": 4,
    "input_dim": 10,
    "n_views": 3
  }
}"#;

fn dca(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dca")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = dca(args);
    assert!(
        out.status.success(),
        "dca {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.json");
    fs::write(&p, TINY).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_then_evaluate_writes_six_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--out", s(&run), "--seed", "5"]);
    let loss = fs::read_to_string(run.join("loss.csv")).unwrap();
    let lines: Vec<&str> = loss.lines().collect();
    assert_eq!(lines[0], "step,L1_iaml,L2_iaml,L_D,L_SeP,L_G,L_CMD,L_T,lr");
    assert_eq!(lines.len(), 5);

    let ckpt = run.join("checkpoint.dca");
    let before = fs::read(&ckpt).unwrap();
    let eval_dir = dir.path().join("eval");
    ok(&["evaluate", "--checkpoint", s(&ckpt), "--out", s(&eval_dir)]);
    assert_eq!(fs::read(&ckpt).unwrap(), before);
    let metrics = fs::read_to_string(eval_dir.join("metrics.csv")).unwrap();
    let names: Vec<&str> = metrics.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["NN", "FT", "ST", "E", "DCG", "mAP"]);
    for line in metrics.lines().skip(1) {
        let v: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&v), "{line}");
    }

    let manifest: Value = serde_json::from_str(&fs::read_to_string(eval_dir.join("run-manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "evaluate");
    assert!(manifest["inputs"][s(&ckpt)].is_string());

    let pr_dir = dir.path().join("pr");
    ok(&["export-pr", "--checkpoint", s(&ckpt), "--out", s(&pr_dir)]);
    let pr = fs::read_to_string(pr_dir.join("pr.csv")).unwrap();
    assert_eq!(pr.lines().count(), 102);
    assert!(fs::read_to_string(pr_dir.join("pr.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn identical_runs_produce_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["train", "--config", s(&cfg), "--out", s(&a), "--seed", "9"]);
    ok(&["train", "--config", s(&cfg), "--out", s(&b), "--seed", "9"]);
    for f in ["loss.csv", "checkpoint.dca", "config.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let c = dir.path().join("c");
    ok(&["train", "--config", s(&cfg), "--out", s(&c), "--seed", "10"]);
    assert_ne!(fs::read(a.join("loss.csv")).unwrap(), fs::read(c.join("loss.csv")).unwrap());
}

#[test]
fn resume_reproduces_the_loss_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let full = dir.path().join("full");
    ok(&["train", "--config", s(&cfg), "--out", s(&full), "--checkpoint-every", "2"]);
    let resumed = dir.path().join("resumed");
    let mid = full.join("checkpoint-2.dca");
    ok(&["train", "--resume", s(&mid), "--out", s(&resumed)]);
    assert_eq!(
        fs::read(full.join("loss.csv")).unwrap(),
        fs::read(resumed.join("loss.csv")).unwrap()
    );
    assert_eq!(
        fs::read(full.join("checkpoint.dca")).unwrap(),
        fs::read(resumed.join("checkpoint.dca")).unwrap()
    );
}

#[test]
fn ablation_switches_reach_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("sep");
    ok(&["train", "--config", s(&cfg), "--out", s(&out), "--encoders-only", "--disable-cmd"]);
    let saved: Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(saved["train"]["encoders_only"], true);
    assert_eq!(saved["train"]["loss"]["enable_cmd"], false);
    let loss = fs::read_to_string(out.join("loss.csv")).unwrap();
    // adversarial columns stay empty when only the encoders train
    assert!(loss.lines().nth(1).unwrap().contains(",,,,,"));
}

#[test]
fn generate_data_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("data");
    ok(&["generate-data", "--config", s(&cfg), "--out", s(&out), "--seed", "2"]);
    let features = out.join("features.txt");
    let text = fs::read_to_string(&features).unwrap();
    assert!(text.starts_with("dca-features v1 input_dim=10 n_views=3\n"));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out.join("run-manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"]["data"], 2);
    assert_eq!(manifest["artifacts"]["features.txt"].as_str().unwrap().len(), 64);

    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&features), "--out", s(&run)]);
    assert!(run.join("checkpoint.dca").exists());

    let bin = dir.path().join("bin");
    ok(&["generate-data", "--config", s(&cfg), "--out", s(&bin), "--seed", "2", "--binary"]);
    assert!(fs::read(bin.join("features.bin")).unwrap().starts_with(b"DCAF"));
}

#[test]
fn unknown_override_exits_one_naming_the_key() {
    let out = dca(&["train", "--set", "train.lr_inti=0.1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.lr_inti"));
}

#[test]
fn usage_and_missing_files_exit_one() {
    assert_eq!(dca(&["train", "--bogus-flag"]).status.code(), Some(1));
    assert_eq!(dca(&["evaluate", "--checkpoint", "/nonexistent/ckpt.dca"]).status.code(), Some(1));
    assert_eq!(dca(&["--help"]).status.code(), Some(0));
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.dca");
    fs::write(&bad, b"DCA1 definitely not a checkpoint").unwrap();
    let out = dca(&["evaluate", "--checkpoint", s(&bad), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("integrity"));
}

#[test]
fn gradcheck_passes_with_defaults() {
    let out = ok(&["gradcheck"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for name in ["L1_iaml", "L2_iaml", "L_D", "L_SeP", "L_G", "L_CMD", "L_T"] {
        let line = text.lines().find(|l| l.starts_with(name)).unwrap();
        assert!(line.ends_with("ok"), "{line}");
    }
}
