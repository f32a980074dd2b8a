//! Runs a preset over a seed range and prints each adversary's rank.
//!
//! `cargo run --release --example sweep -- small iid 0 9`
//! Optional env overrides: LR, SPA (samples per agent), MINBASE.

use std::time::Instant;

use fedchain_core::experiment::{run_experiment, ExperimentConfig, Split};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let split = match args[1].as_str() {
        "iid" => Split::Iid,
        _ => Split::Dirichlet { concentration: 0.5 },
    };
    let (lo, hi): (u64, u64) = (args[2].parse().unwrap(), args[3].parse().unwrap());
    let env = |k: &str| std::env::var(k).ok();
    for seed in lo..=hi {
        let mut cfg = match args[0].as_str() {
            "large" => ExperimentConfig::large(seed, split.clone()),
            _ => ExperimentConfig::small(seed, split.clone()),
        };
        if let Some(v) = env("LR") {
            cfg.fl.local_lr = v.parse().unwrap();
        }
        if let Some(v) = env("SPA") {
            cfg.data.samples_per_agent = v.parse().unwrap();
        }
        if let Some(v) = env("MINBASE") {
            cfg.attack.min_base_samples = v.parse().unwrap();
        }
        let t = Instant::now();
        let out = run_experiment(&cfg).unwrap();
        let s = &out.summary;
        println!(
            "seed {seed} attempts {} bd_acc {:.3} clean {:.3} ranks {:?} top {:?} {:.1}s",
            s.attempts.len(),
            s.backdoor_accuracy,
            s.clean_accuracy,
            s.adversary_ranks.values().collect::<Vec<_>>(),
            out.report.ranking.iter().take(5).map(|a| a.agent_id.as_str()).collect::<Vec<_>>(),
            t.elapsed().as_secs_f64()
        );
    }
}
