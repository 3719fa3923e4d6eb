use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn trafficlm(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trafficlm"))
        .arg("--workdir")
        .arg(workdir)
        .args(["--seed", "3"])
        .args(args)
        .output()
        .expect("binary runs")
}

fn stage(workdir: &Path, args: &[&str]) -> Value {
    let out = trafficlm(workdir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 1, "{stdout}");
    serde_json::from_str(&stdout).unwrap()
}

#[test]
fn demo_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    let gen = stage(w, &["gen-synthetic"]);
    assert_eq!(gen["attacks"], 8);
    let ingest = stage(w, &["ingest"]);
    assert!(ingest["records_used"].as_u64().unwrap() > 0);
    stage(w, &["discretize"]);
    let pre = stage(w, &["pretrain"]);
    assert_eq!(pre["epochs"], 2);
    let eval = stage(w, &["evaluate"]);
    let ppl = eval["val_ppl"].as_f64().unwrap();
    assert!((1.0..10.0).contains(&ppl), "{eval}");
    let ft = stage(w, &["finetune"]);
    assert!(ft["examples"].as_u64().unwrap() > 0);
    let det = stage(w, &["detect"]);
    assert!(det["examples"].as_u64().unwrap() > 0);
    let rep = stage(w, &["report"]);
    let f1 = rep["f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));
    for artifact in ["raw_train.json", "tokens_test.bin", "discretizer.json", "model.ckpt", "head.json", "report.json"] {
        assert!(w.join(artifact).exists(), "{artifact}");
    }

    // Upstream settings changed after the fact: stale artifacts are refused.
    let out = trafficlm(w, &["--set", "n_bins=8", "pretrain"]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("config digest"));
    let out = trafficlm(w, &["--set", "schema=light-6", "evaluate"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema hash"));
}

#[test]
fn discretize_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    let small = ["--set", "synth.nodes=3", "--set", "synth.minutes=600", "--set", "synth.attack_groups=[]"];
    let with = |s: &'static str| [&small[..], &[s]].concat();
    stage(w, &with("gen-synthetic"));
    stage(w, &with("ingest"));
    stage(w, &with("discretize"));
    let read = |name: &str| std::fs::read(w.join(name)).unwrap();
    let first: Vec<Vec<u8>> = ["discretizer.json", "tokens_train.bin", "tokens_val.json"].map(read).to_vec();
    stage(w, &with("discretize"));
    let second: Vec<Vec<u8>> = ["discretizer.json", "tokens_train.bin", "tokens_val.json"].map(read).to_vec();
    assert_eq!(first, second);
}

#[test]
fn detect_before_finetune_reports_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = trafficlm(dir.path(), &["detect"]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("missing artifact") && stderr.contains("head.json"), "{stderr}");
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(trafficlm(dir.path(), &["no-such-stage"]).status.code(), Some(2));
    assert_eq!(trafficlm(dir.path(), &["--set", "bogus.key=1", "ingest"]).status.code(), Some(2));
    let missing = dir.path().join("absent.json");
    let out = trafficlm(dir.path(), &["--config", missing.to_str().unwrap(), "ingest"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ingest_without_inputs_reports_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = trafficlm(dir.path(), &["ingest"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("registry.csv"));
}

#[test]
fn config_file_and_overrides_compose() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"n_bins": 6, "train": {"max_epochs": 4}}"#).unwrap();
    let printed = stage(
        dir.path(),
        &["--config", cfg.to_str().unwrap(), "--set", "train.batch_size=2", "--print-config", "report"],
    );
    assert_eq!(printed["n_bins"], 6);
    assert_eq!(printed["train"]["max_epochs"], 4);
    assert_eq!(printed["train"]["batch_size"], 2);
    assert_eq!(printed["train"]["seed"], 3);
    assert_eq!(printed["paths"]["workdir"], dir.path().to_str().unwrap());
}
