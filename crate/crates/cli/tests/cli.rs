use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cfmimo(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfmimo"))
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    fs::write(
        &path,
        "[data]\nn_train = 2\nn_test = 10\n[model]\nhidden = 8\nfc_hidden = [8]\n[train]\nepochs = 1\nbatch_size = 2\nlr = 1e-3\n",
    )
    .unwrap();
    path.display().to_string()
}

#[test]
fn generate_then_baseline_top4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("out");

    let missing = cfmimo(&["baseline", "--config", &cfg], &out);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("generate"));

    assert!(cfmimo(&["generate", "--config", &cfg], &out).status.success());
    let run = cfmimo(&["baseline", "--config", &cfg, "--strategy", "top", "--m", "4"], &out);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8_lossy(&run.stdout);
    let row = stdout.lines().find(|l| l.starts_with("top4")).expect("summary row");
    assert!(row.contains("40.000"), "{row}");
    let summary = fs::read_to_string(out.join("baseline_summary.json")).unwrap();
    assert!(summary.contains("config_hash"));
}

#[test]
fn train_and_eval_distributed_with_window_template() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("out");
    let flags = ["--config", cfg.as_str(), "--distributed", "--template", "3x3", "--objective", "balance", "--lambda", "0.04"];
    assert!(cfmimo(&[&["generate"][..], &flags].concat(), &out).status.success());
    let train = cfmimo(&[&["train"][..], &flags].concat(), &out);
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    assert!(out.join("topology.json").exists());
    assert!(out.join("policy_distributed/ap_024.ckpt").exists());
    let eval = cfmimo(&[&["eval"][..], &flags].concat(), &out);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    assert!(String::from_utf8_lossy(&eval.stdout).contains("distributed-balance"));
}

#[test]
fn bad_arguments_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert!(!cfmimo(&["baseline", "--objective", "max"], &out).status.success());
    assert!(!cfmimo(&["train", "--template", "4x4"], &out).status.success());
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[experiment]\nfoo = 1\n[train]\nbar = 2\n").unwrap();
    let run = cfmimo(&["generate", "--config", cfg.to_str().unwrap()], &out);
    assert!(!run.status.success());
    let err = String::from_utf8_lossy(&run.stderr);
    assert!(err.contains("experiment.foo") && err.contains("train.bar"), "{err}");
}
