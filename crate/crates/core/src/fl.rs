//! The federated round loop and the in-memory reference aggregators.
//!
//! Aggregation itself is delegated to a [`Transport`]; the chain deployment
//! and [`OracleTransport`] are the two implementations.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{CodecError, PayloadKind};
use crate::data::LabeledDataset;
use crate::nn::{sgd_train, Architecture, Model, NnError};
use crate::params::ParamVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    FedAvg,
    SignSgd,
}

impl Aggregator {
    pub fn payload_kind(self) -> PayloadKind {
        match self {
            Aggregator::FedAvg => PayloadKind::Float32,
            Aggregator::SignSgd => PayloadKind::SignBits,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Aggregator::FedAvg => "fedavg",
            Aggregator::SignSgd => "signsgd",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlConfig {
    pub rounds: usize,
    pub agents: usize,
    pub corrupt_fraction: f64,
    pub selection_fraction: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub kappa: usize,
    pub seed: u64,
    /// Agent-side SGD step size.
    #[serde(default = "default_local_lr")]
    pub local_lr: f64,
}

fn default_local_lr() -> f64 {
    0.01
}

/// `ceil(x)` that ignores floating error just above an integer.
fn ceil_tolerant(x: f64) -> usize {
    (x - 1e-9).ceil().max(0.0) as usize
}

impl FlConfig {
    /// The small setting hyperparameters.
    pub fn small_setting(seed: u64) -> Self {
        Self {
            rounds: 100,
            agents: 10,
            corrupt_fraction: 0.1,
            selection_fraction: 1.0,
            local_epochs: 2,
            batch_size: 256,
            eta: 1.0,
            kappa: 1000,
            seed,
            local_lr: default_local_lr(),
        }
    }

    pub fn validate(&self) -> Result<(), FlError> {
        let bad = |field: &'static str, msg: String| Err(FlError::Config { field, msg });
        if self.rounds < 1 {
            return bad("rounds", "must be >= 1".into());
        }
        if self.agents < 1 {
            return bad("agents", "must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.corrupt_fraction) {
            return bad("corrupt_fraction", format!("{} not in [0, 1]", self.corrupt_fraction));
        }
        if !(self.selection_fraction > 0.0 && self.selection_fraction <= 1.0) {
            return bad("selection_fraction", format!("{} not in (0, 1]", self.selection_fraction));
        }
        if self.local_epochs < 1 {
            return bad("local_epochs", "must be >= 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size", "must be >= 1".into());
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return bad("eta", format!("{} must be positive", self.eta));
        }
        if self.kappa < 1 {
            return bad("kappa", "must be >= 1".into());
        }
        if !(self.local_lr.is_finite() && self.local_lr >= 0.0) {
            return bad("local_lr", format!("{} must be non-negative", self.local_lr));
        }
        Ok(())
    }

    /// `ceil(C * K)`, clamped to `[1, K]`.
    pub fn agents_per_round(&self) -> usize {
        ceil_tolerant(self.selection_fraction * self.agents as f64).clamp(1, self.agents)
    }

    /// `ceil(F * K)`.
    pub fn corrupt_count(&self) -> usize {
        ceil_tolerant(self.corrupt_fraction * self.agents as f64).min(self.agents)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentSpec {
    pub agent_id: String,
    pub dataset: LabeledDataset,
    pub sample_count: u64,
    pub is_corrupt: bool,
}

impl AgentSpec {
    pub fn new(agent_id: impl Into<String>, dataset: LabeledDataset, is_corrupt: bool) -> Self {
        Self {
            agent_id: agent_id.into(),
            sample_count: dataset.len() as u64,
            dataset,
            is_corrupt,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub round_index: usize,
    /// Selected agent ids in ascending agent order.
    pub selected: Vec<String>,
    pub updates: BTreeMap<String, ParamVector>,
    pub sample_counts: BTreeMap<String, u64>,
    pub global_before: ParamVector,
    pub global_after: ParamVector,
}

#[derive(Debug, Error)]
pub enum AggError {
    #[error("no updates to aggregate")]
    Empty,
    #[error("update from {agent} has dim {actual}, expected {expected}")]
    Shape {
        agent: String,
        expected: usize,
        actual: usize,
    },
    #[error("missing or zero sample count for {0}")]
    Weight(String),
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("private chain: {0}")]
    Ledger(#[from] crate::ledger::LedgerError),
    #[error("public chain: {0}")]
    Contract(#[from] crate::contract::ContractError),
    #[error("log store: {0}")]
    Log(#[from] crate::logstore::LogError),
    #[error(transparent)]
    Agg(#[from] AggError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Error)]
pub enum FlError {
    #[error("config field `{field}`: {msg}")]
    Config { field: &'static str, msg: String },
    #[error("expected {expected} agents, got {actual}")]
    AgentCount { expected: usize, actual: usize },
    #[error("duplicate agent id {0}")]
    DuplicateAgent(String),
    #[error("round {round}, agent {agent}: {source}")]
    Training {
        round: usize,
        agent: String,
        source: NnError,
    },
    #[error("round {round}: {source}")]
    Transport {
        round: usize,
        source: TransportError,
    },
    #[error(transparent)]
    Agg(#[from] AggError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Derives a 64-bit seed from the run seed and a labelled tuple. Stable
/// across platforms and independent of evaluation order.
pub fn derive_seed(seed: u64, label: &str, round: usize, agent: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    h.update([0]);
    h.update((round as u64).to_le_bytes());
    h.update(agent.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("8 bytes"))
}

pub fn round_seed(seed: u64, round: usize, agent_id: &str) -> u64 {
    derive_seed(seed, "train", round, agent_id)
}

/// Indices of the agents selected for `round`, ascending.
pub fn sample_agents(config: &FlConfig, round: usize) -> Vec<usize> {
    let k = config.agents;
    let m = config.agents_per_round();
    if m == k {
        return (0..k).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "sample", round, ""));
    let mut picked = sample(&mut rng, k, m).into_vec();
    picked.sort_unstable();
    picked
}

/// Trains a copy of `global` on the agent's data and returns the difference.
pub fn local_update(
    arch: &Architecture,
    agent: &AgentSpec,
    global: &ParamVector,
    config: &FlConfig,
    seed: u64,
) -> Result<ParamVector, NnError> {
    let model = Model::new(arch.clone(), global.clone())?;
    let trained = sgd_train(
        &model,
        &agent.dataset,
        config.local_epochs,
        config.batch_size,
        config.local_lr,
        seed,
    )?;
    trained.params().sub(global)
}

fn common_dim(updates: &BTreeMap<String, ParamVector>) -> Result<usize, AggError> {
    let dim = updates.values().next().ok_or(AggError::Empty)?.dim();
    for (agent, u) in updates {
        if u.dim() != dim {
            return Err(AggError::Shape {
                agent: agent.clone(),
                expected: dim,
                actual: u.dim(),
            });
        }
    }
    Ok(dim)
}

/// `eta * sum(n_k * delta_k) / sum(n_k)`, summed in agent-id order.
pub fn fedavg_oracle(
    updates: &BTreeMap<String, ParamVector>,
    weights: &BTreeMap<String, u64>,
    eta: f64,
) -> Result<ParamVector, AggError> {
    let dim = common_dim(updates)?;
    let mut acc = vec![0.0f64; dim];
    let mut total = 0.0f64;
    for (agent, u) in updates {
        let n = match weights.get(agent) {
            Some(&n) if n > 0 => n as f64,
            _ => return Err(AggError::Weight(agent.clone())),
        };
        total += n;
        for (a, &v) in acc.iter_mut().zip(u.as_slice()) {
            *a += n * f64::from(v);
        }
    }
    Ok(acc.iter().map(|a| (eta * (a / total)) as f32).collect::<Vec<_>>().into())
}

/// `eta * sign(sum_k sign(delta_k))`; zero maps to `+1` both per agent and
/// for the aggregate.
pub fn sign_agg_oracle(
    updates: &BTreeMap<String, ParamVector>,
    eta: f64,
) -> Result<ParamVector, AggError> {
    let dim = common_dim(updates)?;
    let mut votes = vec![0i64; dim];
    for u in updates.values() {
        for (v, &x) in votes.iter_mut().zip(u.as_slice()) {
            *v += if x >= 0.0 { 1 } else { -1 };
        }
    }
    let eta = eta as f32;
    Ok(votes
        .iter()
        .map(|&v| if v >= 0 { eta } else { -eta })
        .collect::<Vec<_>>()
        .into())
}

pub fn aggregate_oracle(
    aggregator: Aggregator,
    updates: &BTreeMap<String, ParamVector>,
    weights: &BTreeMap<String, u64>,
    eta: f64,
) -> Result<ParamVector, AggError> {
    match aggregator {
        Aggregator::FedAvg => fedavg_oracle(updates, weights, eta),
        Aggregator::SignSgd => sign_agg_oracle(updates, eta),
    }
}

/// One selected agent's contribution to a round.
#[derive(Clone, Copy, Debug)]
pub struct Upload<'a> {
    pub agent_id: &'a str,
    pub delta: &'a ParamVector,
    pub sample_count: u64,
}

/// Moves a round's updates to the aggregator and returns the increment.
pub trait Transport {
    fn exchange(
        &mut self,
        round: usize,
        global_before: &ParamVector,
        uploads: &[Upload<'_>],
    ) -> Result<ParamVector, TransportError>;
}

/// Aggregates directly with the oracles; no ledger involved.
#[derive(Clone, Copy, Debug)]
pub struct OracleTransport {
    pub aggregator: Aggregator,
    pub eta: f64,
}

impl Transport for OracleTransport {
    fn exchange(
        &mut self,
        _round: usize,
        _global_before: &ParamVector,
        uploads: &[Upload<'_>],
    ) -> Result<ParamVector, TransportError> {
        let updates = uploads
            .iter()
            .map(|u| (u.agent_id.to_string(), u.delta.clone()))
            .collect();
        let weights = uploads
            .iter()
            .map(|u| (u.agent_id.to_string(), u.sample_count))
            .collect();
        Ok(aggregate_oracle(self.aggregator, &updates, &weights, self.eta)?)
    }
}

/// Runs `config.rounds` rounds starting from `init`.
pub fn run_protocol(
    config: &FlConfig,
    arch: &Architecture,
    init: ParamVector,
    agents: &[AgentSpec],
    transport: &mut dyn Transport,
) -> Result<Vec<RoundRecord>, FlError> {
    config.validate()?;
    if agents.len() != config.agents {
        return Err(FlError::AgentCount {
            expected: config.agents,
            actual: agents.len(),
        });
    }
    let mut seen = std::collections::HashSet::new();
    for a in agents {
        if !seen.insert(a.agent_id.as_str()) {
            return Err(FlError::DuplicateAgent(a.agent_id.clone()));
        }
    }
    init.check_dim(arch.param_count())?;

    let mut global = init;
    let mut records = Vec::with_capacity(config.rounds);
    for round in 0..config.rounds {
        let selected = sample_agents(config, round);
        let deltas: Vec<ParamVector> = selected
            .par_iter()
            .map(|&i| {
                let agent = &agents[i];
                let seed = round_seed(config.seed, round, &agent.agent_id);
                local_update(arch, agent, &global, config, seed).map_err(|source| {
                    FlError::Training {
                        round,
                        agent: agent.agent_id.clone(),
                        source,
                    }
                })
            })
            .collect::<Result<_, _>>()?;

        let uploads: Vec<Upload<'_>> = selected
            .iter()
            .zip(&deltas)
            .map(|(&i, delta)| Upload {
                agent_id: &agents[i].agent_id,
                delta,
                sample_count: agents[i].sample_count,
            })
            .collect();
        let increment = transport
            .exchange(round, &global, &uploads)
            .map_err(|source| FlError::Transport { round, source })?;
        let after = global.add(&increment)?;

        records.push(RoundRecord {
            round_index: round,
            selected: selected.iter().map(|&i| agents[i].agent_id.clone()).collect(),
            updates: selected
                .iter()
                .zip(deltas)
                .map(|(&i, d)| (agents[i].agent_id.clone(), d))
                .collect(),
            sample_counts: selected
                .iter()
                .map(|&i| (agents[i].agent_id.clone(), agents[i].sample_count))
                .collect(),
            global_before: std::mem::replace(&mut global, after.clone()),
            global_after: after,
        });
    }
    Ok(records)
}

/// Recomputes the trajectory from the logged updates with the oracles and
/// checks every stored global model against it.
pub fn replay_trajectory(
    records: &[RoundRecord],
    init: &ParamVector,
    aggregator: Aggregator,
    eta: f64,
) -> Result<Vec<ParamVector>, ReplayError> {
    let mut global = init.clone();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        if r.global_before != global {
            return Err(ReplayError::Diverged {
                round: r.round_index,
                which: "global_before",
            });
        }
        let inc = aggregate_oracle(aggregator, &r.updates, &r.sample_counts, eta)?;
        global = global.add(&inc)?;
        if r.global_after != global {
            return Err(ReplayError::Diverged {
                round: r.round_index,
                which: "global_after",
            });
        }
        out.push(global.clone());
    }
    Ok(out)
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("round {round}: {which} does not match the replayed trajectory")]
    Diverged { round: usize, which: &'static str },
    #[error(transparent)]
    Agg(#[from] AggError),
    #[error(transparent)]
    Nn(#[from] NnError),
}
