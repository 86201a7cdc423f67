//! The `advlens` binary: exit codes, config errors and data determinism.

use std::path::Path;
use std::process::Command;

fn advlens(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_advlens"))
        .arg("--run-dir")
        .arg(dir)
        .args(args)
        .env_remove("ADVLENS_WORKERS")
        .output()
        .expect("binary runs")
}

const SMALL: &[&str] = &["--set", "dataset.num_classes=4", "--set", "dataset.train_per_class=2", "--set", "dataset.val_per_class=2"];

fn gen(dir: &Path, extra: &[&str]) -> std::process::Output {
    let mut args = SMALL.to_vec();
    args.extend_from_slice(extra);
    args.push("gen-data");
    advlens(dir, &args)
}

#[test]
fn gen_data_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    assert!(gen(a.path(), &[]).status.success());
    assert!(gen(b.path(), &[]).status.success());
    let ha = advlens::cli::artifact_hashes(a.path()).unwrap();
    let hb = advlens::cli::artifact_hashes(b.path()).unwrap();
    assert!(!ha.is_empty());
    assert_eq!(ha, hb);
    assert!(a.path().join(advlens::cli::HASHES_FILE).exists());
    assert!(a.path().join("data").join(advlens::cli::CONFIG_ECHO).exists());

    let c = tempfile::tempdir().unwrap();
    assert!(gen(c.path(), &["--seed", "9"]).status.success());
    assert_ne!(ha, advlens::cli::artifact_hashes(c.path()).unwrap());
}

#[test]
fn config_errors_exit_2() {
    let d = tempfile::tempdir().unwrap();
    let out = gen(d.path(), &["--set", "dataset.no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
    let out = gen(d.path(), &["--set", "train.seed=4"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(advlens(d.path(), &["no-such-command"]).status.code(), Some(2));
}

#[test]
fn missing_inputs_name_the_producing_stage() {
    let d = tempfile::tempdir().unwrap();
    let out = advlens(d.path(), &["train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gen-data"));
    assert!(gen(d.path(), &[]).status.success());
    let out = advlens(d.path(), &["attack"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train"));
}

#[test]
fn config_file_is_read() {
    let d = tempfile::tempdir().unwrap();
    let conf = d.path().join("c.conf");
    std::fs::write(&conf, "# small\ndataset.num_classes = 4\ndataset.train_per_class = 2\ndataset.val_per_class = 2\n").unwrap();
    let out = advlens(d.path(), &["--config", conf.to_str().unwrap(), "gen-data"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let echo = std::fs::read_to_string(d.path().join("data").join(advlens::cli::CONFIG_ECHO)).unwrap();
    assert!(echo.contains("\"num_classes\": 4"), "{echo}");
}
