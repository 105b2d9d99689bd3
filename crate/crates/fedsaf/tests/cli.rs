use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fedsaf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedsaf")).args(args).output().expect("spawn fedsaf")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn selftest_exits_zero() {
    let o = fedsaf(&["selftest"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(!out.contains("FAIL"), "{out}");
}

#[test]
fn zero_rounds_writes_empty_round_log() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = fedsaf(&["run", "--rounds", "0", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("rounds.jsonl")).unwrap(), "");
    assert!(out.join("config.echo").exists());
    assert!(out.join("summary.json").exists());
}

#[test]
fn echoed_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a");
    let args = ["run", "--rounds", "2", "--clients", "4", "--seed", "11", "--out", first.to_str().unwrap()];
    assert!(fedsaf(&args).status.success());

    let echo = first.join("config.echo");
    let second = dir.path().join("b");
    let o = fedsaf(&["run", "--config", echo.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let read = |p: &Path| fs::read(p.join("rounds.jsonl")).unwrap();
    assert_eq!(read(&first), read(&second));
}

#[test]
fn invalid_alpha_names_the_key() {
    let o = fedsaf(&["run", "--alpha", "-1", "--rounds", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("partition.alpha"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[training]\nlerning_rate = 0.1\n").unwrap();
    let o = fedsaf(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lerning_rate"), "{}", stderr(&o));
}

#[test]
fn unknown_subcommand_fails() {
    let o = fedsaf(&["train"]);
    assert!(!o.status.success());
}

#[test]
fn export_writes_dataset_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = fedsaf(&["export-data", "--clients", "3", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let found = fs::read_dir(dir.path().join("dataset")).unwrap().count();
    assert!(found > 0);
}
