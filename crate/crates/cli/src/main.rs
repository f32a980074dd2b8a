//! `fedchain`: run experiments, adjudicate claims against finished runs,
//! emit reports, and self-check the wire formats.
//!
//! Exit codes: 0 success, 1 other failure, 2 config error, 3 integrity
//! error, 4 attack failed (detection verdict is vacuous).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use fedchain_core::experiment::{
    audit_run, report_run, run_experiment, verify_formats, write_run_dir, AttackStatus, ExperimentConfig,
    ExperimentError, RunOutcome,
};

const EXIT_ATTACK_FAILED: u8 = 4;

#[derive(Parser)]
#[command(name = "fedchain", version, about = "Accountable federated learning on a simulated two-tier ledger")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, aggregate on the private chain, commit hashes, detect, and write a run directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `fl.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory; defaults to `runs/<name>-seed<seed>-<unix time>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `fl.kappa`.
        #[arg(long)]
        kappa: Option<usize>,
        /// Overrides `detection.assumed_adversaries`.
        #[arg(long)]
        assume_adversaries: Option<usize>,
    },
    /// Open a breach claim against a finished run and adjudicate it.
    Audit {
        run_dir: PathBuf,
        #[arg(long)]
        accused: String,
        #[arg(long)]
        accuser: String,
        #[arg(long)]
        kappa: Option<usize>,
        #[arg(long)]
        assume_adversaries: Option<usize>,
    },
    /// Write CSV tables under `<run_dir>/report/` and print a summary.
    Report { run_dir: PathBuf },
    /// Check the codec against fixed vectors.
    VerifyFormats,
}

fn default_out(cfg: &ExperimentConfig) -> PathBuf {
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    Path::new("runs").join(format!("{}-seed{}-{now}", cfg.name, cfg.fl.seed))
}

fn print_run(out: &RunOutcome, dir: &Path) {
    let s = &out.summary;
    println!("run directory: {}", dir.display());
    for a in &s.attempts {
        println!(
            "attempt seed {}: attack {:?}, backdoor accuracy {:.4}",
            a.seed, a.attack_status, a.backdoor_accuracy
        );
    }
    println!(
        "clean accuracy {:.4}, backdoor accuracy {:.4}, {} uploads in {} batches",
        s.clean_accuracy, s.backdoor_accuracy, s.chain_stats.uploads, s.chain_stats.batches
    );
    print!("{}", out.report.ranking_text());
    for c in &s.claims {
        println!("claim {}: {} vs {} -> {}", c.claim_id, c.accuser, c.accused, c.status.as_str());
    }
}

fn run(cli: Cli) -> Result<ExitCode, ExperimentError> {
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            kappa,
            assume_adversaries,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.fl.seed = s;
            }
            if let Some(k) = kappa {
                cfg.fl.kappa = k;
            }
            if let Some(m) = assume_adversaries {
                cfg.detection.assumed_adversaries = Some(m);
            }
            cfg.validate()?;
            let dir = out.unwrap_or_else(|| default_out(&cfg));
            let outcome = run_experiment(&cfg)?;
            write_run_dir(&outcome, &dir)?;
            print_run(&outcome, &dir);
            if outcome.summary.attack_status == AttackStatus::Failed {
                eprintln!(
                    "attack failed: backdoor accuracy {:.4} below {} after {} attempts; detection verdict is vacuous",
                    outcome.summary.backdoor_accuracy,
                    cfg.attack.min_backdoor_accuracy,
                    outcome.summary.attempts.len()
                );
                return Ok(ExitCode::from(EXIT_ATTACK_FAILED));
            }
            if outcome.summary.attack_status == AttackStatus::Absent {
                println!("attack absent");
            }
        }
        Command::Audit {
            run_dir,
            accused,
            accuser,
            kappa,
            assume_adversaries,
        } => {
            let t = audit_run(&run_dir, &accuser, &accused, kappa, assume_adversaries)?;
            print!("{}", t.text());
            println!("verdict: {}", t.status.as_str());
        }
        Command::Report { run_dir } => {
            let (report, text) = report_run(&run_dir)?;
            print!("{text}");
            for (name, _) in report.files() {
                println!("wrote {}", run_dir.join("report").join(name).display());
            }
        }
        Command::VerifyFormats => match verify_formats() {
            Ok(lines) => lines.iter().for_each(|l| println!("{l}")),
            Err(line) => {
                println!("{line}");
                return Ok(ExitCode::from(1));
            }
        },
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
