//! End-to-end experiments: configuration, full runs over both chains,
//! run directories, post-hoc audits and CSV reports.
//!
//! A run directory is the only thing `audit` and `report` read, so a claim
//! can be adjudicated long after training finished.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{self, AttackError, TrojanSpec};
use crate::codec::{self, CodecError, HashDigest, PayloadKind};
use crate::contract::{
    gas_for_commitments, ClaimStatus, Contract, ContractError, RewardConfig, RewardRecord, Settlement, Verdict,
    GAS_PRICE,
};
use crate::data::{synthetic_shapes, LabeledDataset, SHAPES_CLASSES, SHAPES_SIDE};
use crate::deploy::{ChainDeployment, ChainSettings, ChainStats, Economics};
use crate::detect::{detect, DetectError, DetectionReport};
use crate::fl::{self, derive_seed, AgentSpec, Aggregator, FlConfig, FlError, RoundRecord, TransportError};
use crate::ledger::{ChainConfig, ChaincodeState, Ledger, LedgerError, Membership, PrivateChain};
use crate::logstore::{LogError, LogRecord, LogStore};
use crate::nn::{Architecture, Model, NnError};
use crate::params::ParamVector;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {detail}")]
    Parse { path: PathBuf, detail: String },
    #[error("protocol: {0}")]
    Fl(#[from] FlError),
    #[error("attack: {0}")]
    Attack(#[from] AttackError),
    #[error("detection: {0}")]
    Detect(#[from] DetectError),
    #[error("private chain: {0}")]
    Ledger(#[from] LedgerError),
    #[error("public chain: {0}")]
    Contract(#[from] ContractError),
    #[error("log store: {0}")]
    Log(#[from] LogError),
    #[error("setup: {0}")]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

impl ExperimentError {
    /// Process exit code: 2 for configuration problems, 3 for integrity
    /// failures and unreadable artifacts, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Fl(FlError::Config { .. }) => 2,
            ExperimentError::Integrity(_)
            | ExperimentError::Io { .. }
            | ExperimentError::Parse { .. }
            | ExperimentError::Ledger(_)
            | ExperimentError::Log(_)
            | ExperimentError::Codec(_)
            | ExperimentError::Detect(DetectError::Integrity(_)) => 3,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn config_err<T>(field: &str, msg: impl std::fmt::Display) -> Result<T, ExperimentError> {
    Err(ExperimentError::Config(format!("`{field}`: {msg}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Split {
    Iid,
    Dirichlet { concentration: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub samples_per_agent: usize,
    /// Clean held-out set; its base-class part becomes the poisoned validation set.
    pub validation_samples: usize,
    /// Held-out set for the per-round leave-one-out scores.
    pub loo_samples: usize,
    pub noise: f32,
    pub split: Split,
    /// Every agent must end up with at least this many samples.
    pub min_agent_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            samples_per_agent: 200,
            validation_samples: 1000,
            loo_samples: 200,
            noise: 0.2,
            split: Split::Iid,
            min_agent_samples: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// Initial weights are uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::desk_default(),
            init_scale: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub trojan: TrojanSpec,
    /// Share of each corrupt agent's base-class samples that gets poisoned.
    pub poison_fraction: f64,
    /// The split is redrawn until every corrupt agent holds this many base-class samples.
    pub min_base_samples: usize,
    /// Below this final backdoor accuracy the attack counts as failed.
    pub min_backdoor_accuracy: f64,
    /// Fresh-seed reruns after a failed attack.
    pub max_retries: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            trojan: TrojanSpec::default(),
            poison_fraction: 1.0,
            min_base_samples: 30,
            min_backdoor_accuracy: 0.8,
            max_retries: 3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionConfig {
    /// Number of agents to flag; defaults to `ceil(F * K)`.
    pub assumed_adversaries: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClaimSpec {
    pub accuser: String,
    pub accused: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub fl: FlConfig,
    #[serde(default = "default_aggregator")]
    pub aggregator: Aggregator,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub attack: AttackConfig,
    #[serde(default)]
    pub detection: DetectionConfig,
    #[serde(default)]
    pub chain: ChainSettings,
    #[serde(default)]
    pub economics: Economics,
    /// Claims adjudicated right after training.
    #[serde(default)]
    pub claims: Vec<ClaimSpec>,
    /// Return deposits and pay rewards once the claims are settled.
    #[serde(default)]
    pub finalize: bool,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_aggregator() -> Aggregator {
    Aggregator::FedAvg
}

impl ExperimentConfig {
    /// Small setting on the synthetic task: 10 agents, one adversary, full participation.
    pub fn small(seed: u64, split: Split) -> Self {
        let mut fl = FlConfig::small_setting(seed);
        fl.local_lr = 0.3;
        Self::with(format!("small-{}", split_name(&split)), fl, split)
    }

    /// Large setting scaled to 30 agents, three adversaries and a third of
    /// the agents per round.
    pub fn large(seed: u64, split: Split) -> Self {
        let fl = FlConfig {
            rounds: 200,
            agents: 30,
            corrupt_fraction: 0.1,
            selection_fraction: 1.0 / 3.0,
            local_epochs: 5,
            batch_size: 32,
            eta: 1.0,
            kappa: 1000,
            seed,
            local_lr: 0.05,
        };
        let mut cfg = Self::with(format!("large-{}", split_name(&split)), fl, split);
        cfg.data.samples_per_agent = 100;
        cfg.attack.min_base_samples = 10;
        cfg
    }

    fn with(name: String, fl: FlConfig, split: Split) -> Self {
        Self {
            name,
            fl,
            aggregator: Aggregator::FedAvg,
            model: ModelConfig::default(),
            data: DataConfig {
                split,
                ..DataConfig::default()
            },
            attack: AttackConfig::default(),
            detection: DetectionConfig::default(),
            chain: ChainSettings::default(),
            economics: Economics::default(),
            claims: Vec::new(),
            finalize: false,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            ExperimentError::Config(m) => ExperimentError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn agent_ids(&self) -> Vec<String> {
        let width = (self.fl.agents.saturating_sub(1)).to_string().len().max(2);
        (0..self.fl.agents).map(|i| format!("agent{i:0width$}")).collect()
    }

    /// The first `ceil(F * K)` agents are the adversaries.
    pub fn adversaries(&self) -> Vec<String> {
        self.agent_ids().into_iter().take(self.fl.corrupt_count()).collect()
    }

    pub fn assumed_adversaries(&self) -> usize {
        self.detection.assumed_adversaries.unwrap_or_else(|| self.fl.corrupt_count())
    }

    /// Checks every precondition a run relies on, naming the offending field.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.fl.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        let arch = &self.model.architecture;
        arch.validate().map_err(|e| ExperimentError::Config(format!("`model.architecture`: {e}")))?;
        let side = SHAPES_SIDE * SHAPES_SIDE;
        if arch.classes != SHAPES_CLASSES || arch.input.len() != side || (arch.conv.is_some() && arch.input.channels != 1) {
            return config_err("model.architecture", "must take 16x16x1 inputs and produce 10 classes");
        }
        if !(self.model.init_scale.is_finite() && self.model.init_scale > 0.0) {
            return config_err("model.init_scale", "must be positive");
        }
        if self.fl.kappa > arch.param_count() {
            return config_err("fl.kappa", format!("exceeds the {} model parameters", arch.param_count()));
        }
        let d = &self.data;
        if d.samples_per_agent == 0 {
            return config_err("data.samples_per_agent", "must be positive");
        }
        if d.validation_samples < SHAPES_CLASSES {
            return config_err("data.validation_samples", "must cover every class");
        }
        if d.loo_samples == 0 {
            return config_err("data.loo_samples", "must be positive");
        }
        if !(d.noise.is_finite() && d.noise >= 0.0) {
            return config_err("data.noise", "must be non-negative");
        }
        if d.min_agent_samples == 0 || d.min_agent_samples > d.samples_per_agent {
            return config_err("data.min_agent_samples", "must be in 1..=samples_per_agent");
        }
        if let Split::Dirichlet { concentration } = d.split {
            if !(concentration.is_finite() && concentration > 0.0) {
                return config_err("data.split.concentration", "must be positive");
            }
        }
        let a = &self.attack;
        let shape = crate::data::ImageShape::new(SHAPES_SIDE, SHAPES_SIDE, 1);
        a.trojan
            .validate(shape, SHAPES_CLASSES)
            .map_err(|e| ExperimentError::Config(format!("`attack.trojan`: {e}")))?;
        if !(a.poison_fraction > 0.0 && a.poison_fraction <= 1.0) {
            return config_err("attack.poison_fraction", "must be in (0, 1]");
        }
        if a.min_base_samples == 0 {
            return config_err("attack.min_base_samples", "must be positive");
        }
        if !(0.0..=1.0).contains(&a.min_backdoor_accuracy) {
            return config_err("attack.min_backdoor_accuracy", "must be in [0, 1]");
        }
        if self.assumed_adversaries() > self.fl.agents {
            return config_err("detection.assumed_adversaries", "exceeds the agent count");
        }
        let c = &self.chain;
        if c.chunk_chars == 0 {
            return config_err("chain.chunk_chars", "must be positive");
        }
        if !(0.0..1.0).contains(&c.conflict_rate) {
            return config_err("chain.conflict_rate", "must be in [0, 1)");
        }
        if c.drain_retry_limit == 0 {
            return config_err("chain.drain_retry_limit", "must be positive");
        }
        let e = &self.economics;
        if e.deposit == 0 {
            return config_err("economics.deposit", "must be positive");
        }
        let gas = GAS_PRICE * gas_for_commitments(self.fl.rounds as u64);
        if e.initial_balance < e.deposit + gas {
            return config_err(
                "economics.initial_balance",
                format!("must cover the deposit plus {gas} units of gas"),
            );
        }
        let ids = self.agent_ids();
        for (i, c) in self.claims.iter().enumerate() {
            for who in [&c.accuser, &c.accused] {
                if !ids.contains(who) {
                    return config_err(&format!("claims[{i}]"), format!("unknown agent {who}"));
                }
            }
            if c.accuser == c.accused {
                return config_err(&format!("claims[{i}]"), "an agent cannot accuse itself");
            }
        }
        Ok(())
    }
}

fn split_name(s: &Split) -> &'static str {
    match s {
        Split::Iid => "iid",
        Split::Dirichlet { .. } => "noniid",
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackStatus {
    /// No corrupt agents were configured.
    Absent,
    Succeeded,
    /// Final backdoor accuracy stayed below the threshold; detection is vacuous.
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentInfo {
    pub agent_id: String,
    pub corrupt: bool,
    pub samples: u64,
    pub base_class_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttemptSummary {
    pub seed: u64,
    pub attack_status: AttackStatus,
    pub backdoor_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub seed: u64,
    /// Seed of the attempt this run directory holds.
    pub seed_used: u64,
    pub attempts: Vec<AttemptSummary>,
    pub attack_status: AttackStatus,
    pub clean_accuracy: f64,
    pub backdoor_accuracy: f64,
    pub final_backdoor_loss: f64,
    pub split_draws: usize,
    pub agents: Vec<AgentInfo>,
    pub adversaries: Vec<String>,
    pub flagged: Vec<String>,
    /// 1-based rank of each adversary in the detection ranking.
    pub adversary_ranks: BTreeMap<String, usize>,
    pub chain_stats: ChainStats,
    pub latency: BTreeMap<String, f64>,
    pub claims: Vec<ClaimOutcome>,
    pub rewards: Vec<RewardRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClaimOutcome {
    pub claim_id: u64,
    pub accuser: String,
    pub accused: String,
    pub status: ClaimStatus,
}

/// Per-round metadata; the updates themselves live in the log store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMeta {
    pub round: usize,
    pub selected: Vec<String>,
    pub sample_counts: BTreeMap<String, u64>,
    pub global_before: HashDigest,
    pub global_after: HashDigest,
}

pub struct RunOutcome {
    pub config: ExperimentConfig,
    pub summary: RunSummary,
    pub init: ParamVector,
    pub records: Vec<RoundRecord>,
    pub report: DetectionReport,
    pub chain: PrivateChain,
    pub contract: Contract,
    pub logs: LogStore,
    pub transcripts: Vec<AuditTranscript>,
}

impl RunOutcome {
    /// 1-based rank of `agent` in the detection ranking.
    pub fn rank_of(&self, agent: &str) -> Option<usize> {
        self.report.position(agent).map(|p| p + 1)
    }
}

struct Prepared {
    agents: Vec<AgentSpec>,
    info: Vec<AgentInfo>,
    validation: LabeledDataset,
    poisoned: LabeledDataset,
    loo: LabeledDataset,
    init: ParamVector,
    split_draws: usize,
}

const MAX_SPLIT_DRAWS: usize = 10_000;

fn poisoned_validation(config: &ExperimentConfig, seed: u64) -> Result<(LabeledDataset, LabeledDataset), ExperimentError> {
    let d = &config.data;
    let validation = synthetic_shapes(d.validation_samples, d.noise, derive_seed(seed, "validation", 0, ""));
    let poisoned = attack::build_poisoned_validation(&validation, &config.attack.trojan)?;
    Ok((validation, poisoned))
}

fn init_params(config: &ExperimentConfig, seed: u64) -> Result<ParamVector, ExperimentError> {
    Ok(Model::uniform_init(
        config.model.architecture.clone(),
        config.model.init_scale,
        derive_seed(seed, "init", 0, ""),
    )?
    .into_params())
}

fn prepare(config: &ExperimentConfig, seed: u64) -> Result<Prepared, ExperimentError> {
    let d = &config.data;
    let k = config.fl.agents;
    let corrupt = config.fl.corrupt_count();
    let base = config.attack.trojan.base_class;
    let train = synthetic_shapes(d.samples_per_agent * k, d.noise, derive_seed(seed, "train", 0, ""));
    let mut draws = 0;
    let parts = loop {
        let split_seed = derive_seed(seed, "split", draws, "");
        draws += 1;
        let parts = match d.split {
            Split::Iid => train.iid_split(k, split_seed),
            Split::Dirichlet { concentration } => attack::dirichlet_split(&train, k, concentration, split_seed)?,
        };
        let sizes_ok = parts.iter().all(|p| p.len() >= d.min_agent_samples);
        let base_ok = parts[..corrupt]
            .iter()
            .all(|p| p.class_counts()[base] >= config.attack.min_base_samples);
        if sizes_ok && base_ok {
            break parts;
        }
        if draws >= MAX_SPLIT_DRAWS {
            return config_err(
                "data.split",
                format!("no split in {MAX_SPLIT_DRAWS} draws meets the sample minimums"),
            );
        }
    };
    let ids = config.agent_ids();
    let mut agents = Vec::with_capacity(k);
    let mut info = Vec::with_capacity(k);
    for (i, (id, part)) in ids.into_iter().zip(parts).enumerate() {
        let is_corrupt = i < corrupt;
        let base_class_samples = part.class_counts()[base];
        let data = if is_corrupt {
            attack::poison_dataset(&part, &config.attack.trojan, config.attack.poison_fraction)?
        } else {
            part
        };
        info.push(AgentInfo {
            agent_id: id.clone(),
            corrupt: is_corrupt,
            samples: data.len() as u64,
            base_class_samples,
        });
        agents.push(AgentSpec::new(id, data, is_corrupt));
    }
    let (validation, poisoned) = poisoned_validation(config, seed)?;
    let loo = synthetic_shapes(d.loo_samples, d.noise, derive_seed(seed, "loo", 0, ""));
    Ok(Prepared {
        agents,
        info,
        validation,
        poisoned,
        loo,
        init: init_params(config, seed)?,
        split_draws: draws,
    })
}

/// Seed of the `attempt`-th try: the configured seed first, then derived ones.
pub fn attempt_seed(seed: u64, attempt: usize) -> u64 {
    if attempt == 0 {
        seed
    } else {
        derive_seed(seed, "retry", attempt, "")
    }
}

/// One training run with a fixed seed, followed by detection.
fn execute(config: &ExperimentConfig, seed: u64) -> Result<RunOutcome, ExperimentError> {
    let arch = config.model.architecture.clone();
    let p = prepare(config, seed)?;
    let ids = config.agent_ids();
    let mut fl_cfg = config.fl.clone();
    fl_cfg.seed = seed;
    let mut dep = ChainDeployment::new(
        &ids,
        arch.clone(),
        config.aggregator,
        fl_cfg.eta,
        &config.chain,
        &config.economics,
        p.loo.clone(),
        LogStore::in_memory(),
        seed,
    )?;
    let records = fl::run_protocol(&fl_cfg, &arch, p.init.clone(), &p.agents, &mut dep)?;
    let stats = dep.stats().clone();
    let latency = dep.latency();

    let last = records.last().map_or(&p.init, |r| &r.global_after);
    let model = Model::new(arch.clone(), last.clone())?;
    let clean_accuracy = model.accuracy(&p.validation)?;
    let backdoor_accuracy = attack::backdoor_accuracy(&model, &p.poisoned, &config.attack.trojan)?;
    let final_backdoor_loss = attack::backdoor_loss(&model, &p.poisoned)?;
    let adversaries = config.adversaries();
    let attack_status = if adversaries.is_empty() {
        AttackStatus::Absent
    } else if backdoor_accuracy >= config.attack.min_backdoor_accuracy {
        AttackStatus::Succeeded
    } else {
        AttackStatus::Failed
    };

    let report = detect(
        &arch,
        &p.init,
        &records,
        config.aggregator,
        fl_cfg.eta,
        &ids,
        &p.poisoned,
        fl_cfg.kappa,
        config.assumed_adversaries(),
    )?;
    let adversary_ranks = adversaries
        .iter()
        .filter_map(|a| report.position(a).map(|r| (a.clone(), r + 1)))
        .collect();
    let (chain, contract, logs) = dep.into_parts();
    Ok(RunOutcome {
        config: config.clone(),
        summary: RunSummary {
            name: config.name.clone(),
            seed: config.fl.seed,
            seed_used: seed,
            attempts: Vec::new(),
            attack_status,
            clean_accuracy,
            backdoor_accuracy,
            final_backdoor_loss,
            split_draws: p.split_draws,
            agents: p.info,
            adversaries,
            flagged: report.flagged.clone(),
            adversary_ranks,
            chain_stats: stats,
            latency,
            claims: Vec::new(),
            rewards: Vec::new(),
        },
        init: p.init,
        records,
        report,
        chain,
        contract,
        logs,
        transcripts: Vec::new(),
    })
}

/// Runs the experiment, rerunning with fresh seeds while the attack fails
/// (up to `attack.max_retries` times), then settles configured claims.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutcome, ExperimentError> {
    config.validate()?;
    let mut attempts = Vec::new();
    let mut attempt = 0;
    let mut out = loop {
        let seed = attempt_seed(config.fl.seed, attempt);
        let out = execute(config, seed)?;
        attempts.push(AttemptSummary {
            seed,
            attack_status: out.summary.attack_status,
            backdoor_accuracy: out.summary.backdoor_accuracy,
        });
        if out.summary.attack_status != AttackStatus::Failed || attempt >= config.attack.max_retries {
            break out;
        }
        attempt += 1;
    };
    out.summary.attempts = attempts;

    for c in &config.claims {
        let ev = Evidence {
            config,
            seed: out.summary.seed_used,
            init: &out.init,
            chain: &out.chain,
        };
        let t = adjudicate(&ev, &mut out.contract, &mut out.logs, &c.accuser, &c.accused, None, None)?;
        out.summary.claims.push(t.outcome());
        out.transcripts.push(t);
    }
    if config.finalize {
        out.summary.rewards = out.contract.pay_rewards(
            &out.summary.latency,
            RewardConfig {
                base_reward: config.economics.base_reward,
                speed_bonus: config.economics.speed_bonus,
            },
        )?;
    }
    Ok(out)
}

/// What an adjudicator reads: the run's config, the initial model and the
/// private chain. Logs and the contract are passed separately because the
/// adjudication mutates them.
pub struct Evidence<'a> {
    pub config: &'a ExperimentConfig,
    pub seed: u64,
    pub init: &'a ParamVector,
    pub chain: &'a PrivateChain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditTranscript {
    pub claim_id: u64,
    pub accuser: String,
    pub accused: String,
    pub status: ClaimStatus,
    pub steps: Vec<String>,
    pub settlement: Option<Settlement>,
    pub detection: Option<DetectionReport>,
}

impl AuditTranscript {
    pub fn outcome(&self) -> ClaimOutcome {
        ClaimOutcome {
            claim_id: self.claim_id,
            accuser: self.accuser.clone(),
            accused: self.accused.clone(),
            status: self.status,
        }
    }

    pub fn text(&self) -> String {
        let mut s = String::new();
        for line in &self.steps {
            s.push_str(line);
            s.push('\n');
        }
        s
    }
}

fn balances(contract: &Contract) -> BTreeMap<String, (u64, u64)> {
    contract
        .accounts()
        .map(|a| (a.worker_id.clone(), (a.balance, a.deposit_held)))
        .collect()
}

fn balance_lines(steps: &mut Vec<String>, before: &BTreeMap<String, (u64, u64)>, contract: &Contract) {
    for (w, &(bal, held)) in &balances(contract) {
        let (b0, h0) = before.get(w).copied().unwrap_or((0, 0));
        if (bal, held) != (b0, h0) {
            steps.push(format!(
                "  {w}: balance {b0} -> {bal} ({:+}), deposit {h0} -> {held}",
                bal as i128 - b0 as i128
            ));
        }
    }
    steps.push(format!("  pool {} burned {}", contract.pool(), contract.burned()));
}

/// Rebuilds the round records from logs fetched under `claim_id`'s grants
/// and the private chain's aggregates, cross-checking each logged update
/// against its public commitment.
fn rebuild_rounds(
    ev: &Evidence<'_>,
    contract: &Contract,
    logs: &mut LogStore,
    claim_id: u64,
    steps: &mut Vec<String>,
) -> Result<Vec<RoundRecord>, ExperimentError> {
    let dim = ev.config.model.architecture.param_count();
    let workers: Vec<String> = contract.accounts().map(|a| a.worker_id.clone()).collect();
    let mut by_round: BTreeMap<u64, Vec<LogRecord>> = BTreeMap::new();
    let mut fetched = 0;
    for w in &workers {
        let g = logs.grant_access(claim_id, w);
        for r in logs.fetch_logs(g.grant_id)? {
            fetched += 1;
            by_round.entry(r.epoch_index).or_default().push(r);
        }
    }
    steps.push(format!(
        "log access: {} one-time grants, {fetched} records fetched",
        workers.len()
    ));
    let rounds = ev.chain.state().epoch_index;
    let mut global = ev.init.clone();
    let mut out = Vec::with_capacity(rounds as usize);
    for round in 0..rounds {
        let recs = by_round
            .remove(&round)
            .ok_or_else(|| ExperimentError::Integrity(format!("no logs for round {round}")))?;
        let mut updates = BTreeMap::new();
        let mut counts = BTreeMap::new();
        for r in recs {
            let committed = contract
                .commitments(&r.worker_id)
                .iter()
                .find(|c| c.round == round)
                .ok_or_else(|| {
                    ExperimentError::Integrity(format!("{} logged round {round} without a commitment", r.worker_id))
                })?;
            if committed.digest != r.digest() {
                return Err(ExperimentError::Integrity(format!(
                    "log of {} for round {round} does not match its commitment",
                    r.worker_id
                )));
            }
            updates.insert(r.worker_id.clone(), r.update(dim)?);
            counts.insert(r.worker_id.clone(), r.sample_count);
        }
        let after = global.add(&ev.chain.global_increment(round)?)?;
        out.push(RoundRecord {
            round_index: round as usize,
            selected: updates.keys().cloned().collect(),
            updates,
            sample_counts: counts,
            global_before: std::mem::replace(&mut global, after.clone()),
            global_after: after,
        });
    }
    if let Some(extra) = by_round.keys().next() {
        return Err(ExperimentError::Integrity(format!("logs for round {extra} beyond the chain's last epoch")));
    }
    Ok(out)
}

/// The full breach flow: open a claim over all of the accused's
/// commitments, verify them against the private chain, and on a clean
/// hash check replay detection from the logs; then settle.
pub fn adjudicate(
    ev: &Evidence<'_>,
    contract: &mut Contract,
    logs: &mut LogStore,
    accuser: &str,
    accused: &str,
    kappa: Option<usize>,
    assumed_adversaries: Option<usize>,
) -> Result<AuditTranscript, ExperimentError> {
    let mut steps = Vec::new();
    let start = balances(contract);
    let m = contract.commitments(accused).len() as u64;
    if m == 0 {
        return Err(ExperimentError::Integrity(format!("{accused} has no commitments")));
    }
    let claim_id = contract.open_claim(accuser, accused, 0, m - 1)?.claim_id;
    let vc = contract.claim(claim_id)?.verification_contract_id.clone();
    steps.push(format!(
        "claim {claim_id}: {accuser} accuses {accused} over epochs 0..={} ({vc})",
        m - 1
    ));

    let chain = ev.chain;
    let status = contract
        .adjudicate_hashes(claim_id, |w, _epoch, round| {
            chain.recompute_worker_hash(w, round).map_err(|e| e.to_string())
        })?
        .status;
    let mut detection = None;
    let verdict = match status {
        ClaimStatus::HashMismatchConfirmed => {
            steps.push(format!("hash check: ledger copy of {accused} differs from its commitments"));
            None
        }
        ClaimStatus::Suspended => {
            let detail = contract.claim(claim_id)?.detail.clone().unwrap_or_default();
            return Err(ExperimentError::Integrity(format!(
                "claim {claim_id} suspended, private chain unreadable: {detail}"
            )));
        }
        _ => {
            steps.push(format!("hash check: {m} commitments of {accused} match the ledger"));
            let records = rebuild_rounds(ev, contract, logs, claim_id, &mut steps)?;
            let (_, poisoned) = poisoned_validation(ev.config, ev.seed)?;
            let kappa = kappa.unwrap_or(ev.config.fl.kappa);
            let assumed = assumed_adversaries.unwrap_or_else(|| ev.config.assumed_adversaries());
            let ids: Vec<String> = contract.accounts().map(|a| a.worker_id.clone()).collect();
            let report = detect(
                &ev.config.model.architecture,
                ev.init,
                &records,
                ev.config.aggregator,
                ev.config.fl.eta,
                &ids,
                &poisoned,
                kappa,
                assumed,
            )?;
            let rank = report.position(accused).map_or(0, |p| p + 1);
            steps.push(format!(
                "detection: kappa {kappa}, {} qualifying rounds, {accused} ranked {rank} of {}, flagged [{}]",
                report.qualifying_rounds.len(),
                report.ranking.len(),
                report.flagged.join(", ")
            ));
            let v = if report.flagged.iter().any(|f| f == accused) {
                Verdict::TrojanConfirmed
            } else {
                Verdict::Exonerated
            };
            detection = Some(report);
            Some(v)
        }
    };
    let s = contract.settle(claim_id, verdict)?;
    steps.push(format!(
        "settled {}: {} forfeits {}, {} shares of {}, {} to pool",
        s.status.as_str(),
        s.loser,
        s.forfeited,
        s.shares.len(),
        s.shares.first().map_or(0, |x| x.1),
        s.to_pool
    ));
    steps.push("balance changes:".into());
    balance_lines(&mut steps, &start, contract);
    Ok(AuditTranscript {
        claim_id,
        accuser: accuser.to_string(),
        accused: accused.to_string(),
        status: s.status,
        steps,
        settlement: Some(s),
        detection,
    })
}

// ---------------------------------------------------------------------------
// run directories

pub mod files {
    pub const MANIFEST: &str = "MANIFEST";
    pub const CONFIG: &str = "config.toml";
    pub const SUMMARY: &str = "run.json";
    pub const INIT: &str = "init.f32";
    pub const ROUNDS: &str = "rounds.jsonl";
    pub const LEDGER: &str = "chain/ledger.jsonl";
    pub const COMMIT_LOG: &str = "chain/commit_log.jsonl";
    pub const MEMBERS: &str = "chain/members.json";
    pub const CHAIN_STATE: &str = "chain/state.json";
    pub const CONTRACT: &str = "contract/state.json";
    pub const EVENTS: &str = "contract/events.jsonl";
    pub const LOGS: &str = "logs";
    pub const DETECTION: &str = "detection.json";
    pub const RANKING: &str = "ranking.txt";
    pub const AUDITS: &str = "audits";
    pub const REPORT: &str = "report";
}

#[derive(Serialize, Deserialize)]
struct ChainFile {
    config: ChainConfig,
    state: ChaincodeState,
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn write_with<F>(path: &Path, f: F) -> Result<(), ExperimentError>
where
    F: FnOnce(&mut BufWriter<fs::File>) -> Result<(), ExperimentError>,
{
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut w = BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    f(&mut w)?;
    w.flush().map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| ExperimentError::Parse {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

fn file_digest(path: &Path) -> Result<HashDigest, ExperimentError> {
    Ok(codec::hash_bytes(&fs::read(path).map_err(io_err(path))?))
}

/// Writes `out` into `dir`. The manifest says `incomplete` until every
/// artifact is on disk, then lists each file with its digest.
pub fn write_run_dir(out: &RunOutcome, dir: &Path) -> Result<(), ExperimentError> {
    if dir.join(files::MANIFEST).exists() {
        return Err(ExperimentError::Config(format!("{} already holds a run", dir.display())));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_bytes(&dir.join(files::MANIFEST), b"status incomplete\n")?;

    let mut cfg = out.config.clone();
    cfg.fl.seed = out.summary.seed;
    write_bytes(&dir.join(files::CONFIG), cfg.to_toml().as_bytes())?;
    write_json(&dir.join(files::SUMMARY), &out.summary)?;
    write_bytes(&dir.join(files::INIT), &codec::serialize_float32(&out.init)?)?;
    write_with(&dir.join(files::ROUNDS), |w| {
        for r in &out.records {
            let meta = RoundMeta {
                round: r.round_index,
                selected: r.selected.clone(),
                sample_counts: r.sample_counts.clone(),
                global_before: codec::hash_params(&r.global_before, PayloadKind::Float32)?,
                global_after: codec::hash_params(&r.global_after, PayloadKind::Float32)?,
            };
            serde_json::to_writer(&mut *w, &meta).expect("serializable");
            w.write_all(b"\n").map_err(io_err(&dir.join(files::ROUNDS)))?;
        }
        Ok(())
    })?;
    let ledger = out.chain.ledger();
    write_with(&dir.join(files::LEDGER), |w| Ok(ledger.write_entries(w)?))?;
    write_with(&dir.join(files::COMMIT_LOG), |w| Ok(ledger.write_commit_log(w)?))?;
    write_json(&dir.join(files::MEMBERS), ledger.members())?;
    write_json(
        &dir.join(files::CHAIN_STATE),
        &ChainFile {
            config: out.chain.config().clone(),
            state: out.chain.state().clone(),
        },
    )?;
    write_contract(dir, &out.contract)?;
    let mut disk = LogStore::on_disk(dir.join(files::LOGS))?;
    out.logs.export_into(&mut disk)?;
    write_json(&dir.join(files::DETECTION), &out.report)?;
    write_bytes(&dir.join(files::RANKING), out.report.ranking_text().as_bytes())?;
    for t in &out.transcripts {
        write_transcript(dir, t)?;
    }
    finish_manifest(dir)
}

fn write_contract(dir: &Path, contract: &Contract) -> Result<(), ExperimentError> {
    write_json(&dir.join(files::CONTRACT), contract)?;
    let path = dir.join(files::EVENTS);
    write_with(&path, |w| contract.write_events(w).map_err(io_err(&path)))
}

fn write_transcript(dir: &Path, t: &AuditTranscript) -> Result<(), ExperimentError> {
    let base = dir.join(files::AUDITS).join(format!("claim-{:04}", t.claim_id));
    write_bytes(&base.with_extension("txt"), t.text().as_bytes())?;
    write_json(&base.with_extension("json"), t)
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), ExperimentError> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io_err(dir))?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else if p != root.join(files::MANIFEST) {
            out.push(p);
        }
    }
    Ok(())
}

fn finish_manifest(dir: &Path) -> Result<(), ExperimentError> {
    let mut paths = Vec::new();
    collect_files(dir, dir, &mut paths)?;
    let mut text = String::from("status complete\n");
    for p in paths {
        let rel = p.strip_prefix(dir).expect("under run dir");
        let _ = writeln!(text, "{} {}", file_digest(&p)?, rel.display());
    }
    write_bytes(&dir.join(files::MANIFEST), text.as_bytes())
}

/// A run directory read back for audit or reporting.
pub struct LoadedRun {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub summary: RunSummary,
    pub init: ParamVector,
    pub chain: PrivateChain,
    pub contract: Contract,
    pub logs: LogStore,
}

fn require(dir: &Path, name: &str) -> Result<PathBuf, ExperimentError> {
    let p = dir.join(name);
    if p.exists() {
        Ok(p)
    } else {
        Err(ExperimentError::Integrity(format!("missing artifact {}", p.display())))
    }
}

pub fn load_run(dir: &Path) -> Result<LoadedRun, ExperimentError> {
    let manifest = fs::read_to_string(require(dir, files::MANIFEST)?).map_err(io_err(dir))?;
    if manifest.lines().next() != Some("status complete") {
        return Err(ExperimentError::Integrity(format!("{} holds an incomplete run", dir.display())));
    }
    let config = ExperimentConfig::load(&require(dir, files::CONFIG)?)?;
    let summary: RunSummary = read_json(&require(dir, files::SUMMARY)?)?;
    let init_path = require(dir, files::INIT)?;
    let init = codec::deserialize_float32(&fs::read(&init_path).map_err(io_err(&init_path))?)?;
    init.check_dim(config.model.architecture.param_count())?;
    let members: Membership = read_json(&require(dir, files::MEMBERS)?)?;
    let open = |name: &str| -> Result<BufReader<fs::File>, ExperimentError> {
        let p = require(dir, name)?;
        Ok(BufReader::new(fs::File::open(&p).map_err(io_err(&p))?))
    };
    let ledger = Ledger::read_dump(members, open(files::LEDGER)?, open(files::COMMIT_LOG)?)?;
    let cf: ChainFile = read_json(&require(dir, files::CHAIN_STATE)?)?;
    let chain = PrivateChain::from_parts(ledger, cf.config, cf.state);
    let contract: Contract = read_json(&require(dir, files::CONTRACT)?)?;
    let logs = LogStore::on_disk(require(dir, files::LOGS)?)?;
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        config,
        summary,
        init,
        chain,
        contract,
        logs,
    })
}

/// Adjudicates a claim against a finished run directory and stores the
/// transcript and the updated contract state back into it.
pub fn audit_run(
    dir: &Path,
    accuser: &str,
    accused: &str,
    kappa: Option<usize>,
    assumed_adversaries: Option<usize>,
) -> Result<AuditTranscript, ExperimentError> {
    let mut run = load_run(dir)?;
    let ev = Evidence {
        config: &run.config,
        seed: run.summary.seed_used,
        init: &run.init,
        chain: &run.chain,
    };
    let t = adjudicate(&ev, &mut run.contract, &mut run.logs, accuser, accused, kappa, assumed_adversaries)?;
    write_contract(dir, &run.contract)?;
    write_transcript(dir, &t)?;
    finish_manifest(dir)?;
    Ok(t)
}

/// CSV tables derived from a run directory.
pub struct Report {
    pub backdoor_loss_csv: String,
    pub l2_csv: String,
    pub agents_csv: String,
    pub gas_csv: String,
    pub settlements_csv: String,
}

impl Report {
    pub fn files(&self) -> [(&'static str, &str); 5] {
        [
            ("backdoor_loss.csv", &self.backdoor_loss_csv),
            ("l2.csv", &self.l2_csv),
            ("agents.csv", &self.agents_csv),
            ("gas.csv", &self.gas_csv),
            ("settlements.csv", &self.settlements_csv),
        ]
    }

    /// Human-readable summary tables.
    pub fn text(&self, summary: &RunSummary, detection: &DetectionReport) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "run {} seed {} (used {}), attack {:?}, clean accuracy {:.4}, backdoor accuracy {:.4}",
            summary.name,
            summary.seed,
            summary.seed_used,
            summary.attack_status,
            summary.clean_accuracy,
            summary.backdoor_accuracy
        );
        s.push_str(&detection.ranking_text());
        s
    }
}

fn csv_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn build_report(
    detection: &DetectionReport,
    summary: &RunSummary,
    contract: &Contract,
) -> Report {
    let mut loss = String::from("round,backdoor_loss,qualifying\n");
    let mut l2 = String::from("round,agent,restricted_l2\n");
    for r in &detection.rounds {
        let _ = writeln!(loss, "{},{},{}", r.round_index, csv_f64(r.backdoor_loss), r.qualifying);
        for (a, v) in &r.norms {
            let _ = writeln!(l2, "{},{},{}", r.round_index, a, csv_f64(*v));
        }
    }
    let corrupt: BTreeMap<&str, bool> = summary.agents.iter().map(|a| (a.agent_id.as_str(), a.corrupt)).collect();
    let mut agents = String::from("rank,agent,avg_l2,qualifying_rounds,flagged,insufficient_signal,corrupt\n");
    for (i, s) in detection.ranking.iter().enumerate() {
        let _ = writeln!(
            agents,
            "{},{},{},{},{},{},{}",
            i + 1,
            s.agent_id,
            csv_f64(s.avg_l2),
            s.qualifying_rounds,
            detection.flagged.contains(&s.agent_id),
            s.insufficient_signal,
            corrupt.get(s.agent_id.as_str()).copied().unwrap_or(false)
        );
    }
    let mut gas = String::from("worker,commitments,gas_spent,gas_cost,balance,deposit_held\n");
    for a in contract.accounts() {
        let _ = writeln!(
            gas,
            "{},{},{},{},{},{}",
            a.worker_id,
            contract.commitments(&a.worker_id).len(),
            a.gas_spent,
            a.gas_spent * GAS_PRICE,
            a.balance,
            a.deposit_held
        );
    }
    let mut settlements = String::from("claim_id,accuser,accused,status,loser,forfeited,share,to_pool\n");
    for c in contract.claims() {
        let s = contract.events().iter().find_map(|e| match e {
            crate::contract::ContractEvent::Settled(s) if s.claim_id == c.claim_id => Some(s),
            _ => None,
        });
        let _ = writeln!(
            settlements,
            "{},{},{},{},{},{},{},{}",
            c.claim_id,
            c.accuser,
            c.accused,
            c.status.as_str(),
            s.map_or("", |s| s.loser.as_str()),
            s.map_or(0, |s| s.forfeited),
            s.and_then(|s| s.shares.first()).map_or(0, |x| x.1),
            s.map_or(0, |s| s.to_pool)
        );
    }
    Report {
        backdoor_loss_csv: loss,
        l2_csv: l2,
        agents_csv: agents,
        gas_csv: gas,
        settlements_csv: settlements,
    }
}

/// Builds the report for a run directory and writes it under `report/`.
pub fn report_run(dir: &Path) -> Result<(Report, String), ExperimentError> {
    let summary: RunSummary = read_json(&require(dir, files::SUMMARY)?)?;
    let detection: DetectionReport = read_json(&require(dir, files::DETECTION)?)?;
    let contract: Contract = read_json(&require(dir, files::CONTRACT)?)?;
    let report = build_report(&detection, &summary, &contract);
    for (name, body) in report.files() {
        write_bytes(&dir.join(files::REPORT).join(name), body.as_bytes())?;
    }
    let text = report.text(&summary, &detection);
    Ok((report, text))
}

/// One line per codec self-check; `Err` carries the failing line.
pub fn verify_formats() -> Result<Vec<String>, String> {
    let mut lines = Vec::new();
    let mut check = |name: &str, ok: bool| {
        let line = format!("{} {name}", if ok { "ok  " } else { "FAIL" });
        lines.push(line.clone());
        if ok {
            Ok(())
        } else {
            Err(line)
        }
    };
    check(
        "sha256 of empty input",
        codec::hash_bytes(b"").as_str() == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855",
    )?;
    let signs = ParamVector::new(vec![1.0, -1.0, 0.0, -0.5, 2.0, -3.0, 0.25, -0.0, 7.0]);
    let packed = codec::pack_signs(&signs);
    check("sign bits are msb-first, set for non-negative (including -0.0)", packed.bytes() == [0b1010_1011, 0b1000_0000])?;
    let text = codec::encode_payload(&signs, PayloadKind::SignBits).map_err(|e| e.to_string())?;
    check("sign payload is padded base64", text == "q4A=")?;
    let back = codec::decode_payload(&text, PayloadKind::SignBits, 9).map_err(|e| e.to_string())?;
    check("sign payload round-trips to +-1", back == packed.to_signs())?;
    check("base64 length is dim/6 for dim divisible by 24", codec::base64_len(300_000_000) == 50_000_000)?;
    let floats = ParamVector::new(vec![1.0, -2.5]);
    let hex = codec::encode_payload(&floats, PayloadKind::Float32).map_err(|e| e.to_string())?;
    check("float32 payload is little-endian lowercase hex", hex == "0000803f000020c0")?;
    let digest = codec::hash_params(&floats, PayloadKind::Float32).map_err(|e| e.to_string())?;
    let chunks = codec::WireBatch::split("w", 0, 1, PayloadKind::Float32, &hex, 5);
    let joined = codec::reassemble(&chunks).map_err(|e| e.to_string())?;
    let rehash = codec::hash_bytes(
        &codec::payload_to_canonical_bytes(&joined, PayloadKind::Float32, 2).map_err(|e| e.to_string())?,
    );
    check("chunking leaves the digest unchanged", chunks.len() == 4 && rehash == digest)?;
    check(
        "uppercase hex is rejected",
        codec::payload_to_canonical_bytes("0000803F000020C0", PayloadKind::Float32, 2).is_err(),
    )?;
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ExperimentConfig::small(0, Split::Iid).validate().unwrap();
        ExperimentConfig::large(0, Split::Dirichlet { concentration: 0.5 }).validate().unwrap();
        assert_eq!(ExperimentConfig::large(0, Split::Iid).fl.agents_per_round(), 10);
        assert_eq!(ExperimentConfig::large(0, Split::Iid).adversaries().len(), 3);
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let cfg = ExperimentConfig::small(4, Split::Dirichlet { concentration: 0.5 });
        let text = cfg.to_toml();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        let bad = text.replace("[fl]", "[fl]\nlearning_rate = 1.0");
        assert!(matches!(ExperimentConfig::from_toml(&bad), Err(ExperimentError::Config(_))));
        let bad = format!("{text}\n[surprise]\nx = 1\n");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn field_errors_name_the_field() {
        let mut cfg = ExperimentConfig::small(0, Split::Iid);
        cfg.attack.poison_fraction = 0.0;
        let e = cfg.validate().unwrap_err().to_string();
        assert!(e.contains("attack.poison_fraction"), "{e}");
        let mut cfg = ExperimentConfig::small(0, Split::Iid);
        cfg.fl.kappa = 10_000_000;
        assert!(cfg.validate().unwrap_err().to_string().contains("fl.kappa"));
        let mut cfg = ExperimentConfig::small(0, Split::Iid);
        cfg.economics.initial_balance = cfg.economics.deposit;
        assert!(cfg.validate().unwrap_err().to_string().contains("economics.initial_balance"));
        let mut cfg = ExperimentConfig::small(0, Split::Iid);
        cfg.claims.push(ClaimSpec {
            accuser: "agent01".into(),
            accused: "agent99".into(),
        });
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn agent_ids_widen_with_count() {
        let mut cfg = ExperimentConfig::small(0, Split::Iid);
        assert_eq!(cfg.agent_ids()[3], "agent03");
        cfg.fl.agents = 150;
        assert_eq!(cfg.agent_ids()[3], "agent003");
    }

    #[test]
    fn format_self_checks_pass() {
        let lines = verify_formats().unwrap();
        assert!(lines.iter().all(|l| l.starts_with("ok")));
    }

    #[test]
    fn attempt_seeds_differ() {
        assert_eq!(attempt_seed(5, 0), 5);
        assert_ne!(attempt_seed(5, 1), attempt_seed(5, 2));
    }
}
