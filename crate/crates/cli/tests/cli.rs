use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fedchain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedchain")).args(args).output().unwrap()
}

fn quick() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/quick.toml")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn verify_formats_passes() {
    let o = fedchain(&["verify-formats"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).lines().all(|l| l.starts_with("ok")));
}

#[test]
fn run_audit_report_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let d = dir.to_str().unwrap();
    let o = fedchain(&["run", "--config", quick().to_str().unwrap(), "--seed", "3", "--out", d]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("claim 0: agent01 vs agent00"));
    assert!(fs::read_to_string(dir.join("config.toml")).unwrap().contains("seed = 3"));

    let o = fedchain(&["audit", d, "--accused", "agent03", "--accuser", "agent02", "--kappa", "50"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("kappa 50"), "{out}");
    assert!(out.contains("verdict: "));

    let o = fedchain(&["report", d]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.join("report/settlements.csv").exists());
    let settlements = fs::read_to_string(dir.join("report/settlements.csv")).unwrap();
    assert_eq!(settlements.lines().count(), 3);

    // Same config and seed into an existing directory is refused.
    let o = fedchain(&["run", "--config", quick().to_str().unwrap(), "--out", d]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    let text = fs::read_to_string(quick()).unwrap().replace("kappa = 200", "kappa = 200\nkapa = 1");
    fs::write(&bad, text).unwrap();
    let o = fedchain(&["run", "--config", bad.to_str().unwrap(), "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("kapa"), "{}", stderr(&o));

    let o = fedchain(&["run", "--config", quick().to_str().unwrap(), "--assume-adversaries", "9"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("detection.assumed_adversaries"));
}

#[test]
fn missing_run_dir_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("absent");
    let o = fedchain(&["audit", d.to_str().unwrap(), "--accused", "agent00", "--accuser", "agent01"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("MANIFEST"));
    let o = fedchain(&["report", d.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn failed_attack_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("weak.toml");
    let text = fs::read_to_string(quick())
        .unwrap()
        .replace("rounds = 8", "rounds = 1")
        .replace("min_backdoor_accuracy = 0.0", "min_backdoor_accuracy = 1.0")
        .replace("[[claims]]\naccuser = \"agent01\"\naccused = \"agent00\"\n", "");
    fs::write(&cfg, text).unwrap();
    let o = fedchain(&["run", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("attack failed"));
    assert!(tmp.path().join("r/MANIFEST").exists());
}
