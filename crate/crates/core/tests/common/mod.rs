#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use fedchain_core::experiment::ExperimentConfig;

pub fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

pub fn quick_config() -> ExperimentConfig {
    ExperimentConfig::load(&config_path("quick.toml")).unwrap()
}

/// Flips one payload character of `worker`'s first stored batch in a run
/// directory's ledger dump, as a malicious ledger operator would.
pub fn tamper_first_batch(run_dir: &Path, worker: &str) {
    let path = run_dir.join("chain/ledger.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let mut done = false;
    let lines: Vec<String> = text
        .lines()
        .map(|line| {
            let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
            let key = v["key"].as_str().unwrap().to_string();
            let is_batch = key.len() == worker.len() + 5
                && key.starts_with(worker)
                && key[worker.len()..].bytes().all(|b| b.is_ascii_digit());
            if done || !is_batch {
                return line.to_string();
            }
            let mut payload = v["value"].as_str().unwrap().to_string();
            let first = payload.remove(0);
            payload.insert(0, if first == '0' { '1' } else { '0' });
            v["value"] = serde_json::Value::String(payload);
            done = true;
            serde_json::to_string(&v).unwrap()
        })
        .collect();
    assert!(done, "no batch of {worker} in the ledger dump");
    fs::write(&path, lines.join("\n") + "\n").unwrap();
}

/// Every file under `dir` with its bytes, sorted by relative path.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}
