//! Wires the private chain, the public contract and the log store into a
//! [`Transport`] so the FL loop runs end to end over the ledgers.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::mpsc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{self, WireBatch, DEFAULT_CHUNK_CHARS};
use crate::contract::{Contract, UNITS_PER_COIN};
use crate::data::LabeledDataset;
use crate::fl::{derive_seed, Aggregator, Transport, TransportError, Upload};
use crate::ledger::{ChainConfig, ChainEvent, LedgerError, Membership, PrivateChain};
use crate::logstore::{self, LogRecord, LogStore, LogicalTime};
use crate::nn::Architecture;
use crate::params::ParamVector;

/// Private-chain knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainSettings {
    /// Maximum characters per wire batch.
    pub chunk_chars: usize,
    /// Probability that a committing write is forced into an MVCC conflict.
    pub conflict_rate: f64,
    pub drain_retry_limit: usize,
    /// Seeds the commit-order scheduler; `None` derives it from the run seed.
    pub scheduler_seed: Option<u64>,
}

impl Default for ChainSettings {
    fn default() -> Self {
        Self {
            chunk_chars: DEFAULT_CHUNK_CHARS,
            conflict_rate: 0.0,
            drain_retry_limit: 64,
            scheduler_seed: None,
        }
    }
}

/// Public-chain amounts, in base units.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Economics {
    pub initial_balance: u64,
    pub deposit: u64,
    pub reward_pool: u64,
    pub base_reward: u64,
    pub speed_bonus: u64,
}

impl Default for Economics {
    fn default() -> Self {
        Self {
            initial_balance: 10 * UNITS_PER_COIN,
            deposit: UNITS_PER_COIN,
            reward_pool: 10 * UNITS_PER_COIN,
            base_reward: UNITS_PER_COIN / 10,
            speed_bonus: UNITS_PER_COIN / 10,
        }
    }
}

/// A worker's public address: `0x` plus the first 40 hex digits of its id's digest.
pub fn public_address(worker: &str) -> String {
    format!("0x{}", &codec::hash_bytes(worker.as_bytes()).as_str()[..40])
}

/// Per-run chain traffic counters.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainStats {
    pub uploads: u64,
    pub batches: u64,
    pub cached: u64,
    pub commitments: u64,
}

pub struct ChainDeployment {
    arch: Architecture,
    aggregator: Aggregator,
    eta: f64,
    chain: PrivateChain,
    contract: Contract,
    logs: LogStore,
    credentials: BTreeMap<String, String>,
    loo_validation: LabeledDataset,
    events: mpsc::Receiver<ChainEvent>,
    ranks: BTreeMap<String, Vec<usize>>,
    stats: ChainStats,
}

impl ChainDeployment {
    /// Sets up both chains for `workers`: credentials, channels, funded and
    /// registered escrow accounts, and the reward pool.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        workers: &[String],
        arch: Architecture,
        aggregator: Aggregator,
        eta: f64,
        settings: &ChainSettings,
        economics: &Economics,
        loo_validation: LabeledDataset,
        logs: LogStore,
        seed: u64,
    ) -> Result<Self, TransportError> {
        let mut members = Membership::default();
        let credentials = workers
            .iter()
            .map(|w| (w.clone(), members.issue(w, derive_seed(seed, "credential", 0, w))))
            .collect();
        let config = ChainConfig {
            dim: arch.param_count(),
            payload_kind: aggregator.payload_kind(),
            chunk_chars: settings.chunk_chars,
            drain_retry_limit: settings.drain_retry_limit,
        };
        let scheduler = settings
            .scheduler_seed
            .unwrap_or_else(|| derive_seed(seed, "scheduler", 0, ""));
        let mut chain = PrivateChain::new(members, config, scheduler)?;
        if settings.conflict_rate > 0.0 {
            chain
                .ledger_mut()
                .inject_conflicts(settings.conflict_rate, derive_seed(seed, "conflicts", 0, ""));
        }
        let events = chain.subscribe();

        let mut contract = Contract::new(workers.iter().cloned());
        for w in workers {
            contract.fund(w, economics.initial_balance)?;
            contract.register_and_deposit(w, &public_address(w), economics.deposit)?;
        }
        if economics.reward_pool > 0 {
            contract.fund_pool(economics.reward_pool);
        }
        Ok(Self {
            arch,
            aggregator,
            eta,
            chain,
            contract,
            logs,
            credentials,
            loo_validation,
            events,
            ranks: BTreeMap::new(),
            stats: ChainStats::default(),
        })
    }

    pub fn chain(&self) -> &PrivateChain {
        &self.chain
    }

    pub fn contract(&self) -> &Contract {
        &self.contract
    }

    pub fn contract_mut(&mut self) -> &mut Contract {
        &mut self.contract
    }

    pub fn logs(&self) -> &LogStore {
        &self.logs
    }

    pub fn stats(&self) -> &ChainStats {
        &self.stats
    }

    pub fn credential(&self, worker: &str) -> Option<&str> {
        self.credentials.get(worker).map(String::as_str)
    }

    /// Mean completion rank per worker; lower finished earlier.
    pub fn latency(&self) -> BTreeMap<String, f64> {
        self.ranks
            .iter()
            .map(|(w, r)| (w.clone(), r.iter().sum::<usize>() as f64 / r.len() as f64))
            .collect()
    }

    pub fn into_parts(self) -> (PrivateChain, Contract, LogStore) {
        (self.chain, self.contract, self.logs)
    }
}

impl Transport for ChainDeployment {
    fn exchange(
        &mut self,
        round: usize,
        global_before: &ParamVector,
        uploads: &[Upload<'_>],
    ) -> Result<ParamVector, TransportError> {
        let kind = self.aggregator.payload_kind();
        let dim = self.arch.param_count();
        let expected: BTreeSet<String> = uploads.iter().map(|u| u.agent_id.to_string()).collect();
        let epoch = self.chain.open_epoch(expected)?;
        if epoch != round as u64 {
            return Err(LedgerError::EpochState(format!("chain is at epoch {epoch}, protocol at round {round}")).into());
        }

        // workers encode and shard locally
        let encoded: Vec<(Vec<u8>, Vec<WireBatch>)> = uploads
            .par_iter()
            .map(|u| -> Result<_, TransportError> {
                let bytes = codec::canonical_bytes(u.delta, kind)?;
                let text = codec::encode_payload(u.delta, kind)?;
                let batches =
                    WireBatch::split(u.agent_id, epoch, u.sample_count, kind, &text, self.chain.config().chunk_chars);
                Ok((bytes, batches))
            })
            .collect::<Result<_, _>>()?;

        let mut items = Vec::new();
        for (u, (_, batches)) in uploads.iter().zip(&encoded) {
            let cred = self.credentials.get(u.agent_id).cloned().unwrap_or_default();
            items.extend(batches.iter().map(|b| (u.agent_id.to_string(), cred.clone(), b.clone())));
        }
        let outcomes = self.chain.gateway_upload_concurrent(&items)?;
        self.stats.batches += items.len() as u64;
        self.stats.cached += outcomes
            .iter()
            .filter(|o| **o == crate::ledger::GatewayOutcome::Cached)
            .count() as u64;
        self.chain.cache_drain()?;
        self.stats.uploads += uploads.len() as u64;

        // every worker commits the digest of what it sent
        for (u, (bytes, _)) in uploads.iter().zip(&encoded) {
            let next = self.contract.commitments(u.agent_id).len() as u64;
            self.contract
                .commit_hash(u.agent_id, next, round as u64, codec::hash_bytes(bytes))?;
            self.stats.commitments += 1;
        }

        let increment = self.chain.aggregate(epoch, self.aggregator, self.eta)?;
        while let Ok(ChainEvent::AggregationComplete { epoch_index, .. }) = self.events.try_recv() {
            if epoch_index != epoch {
                return Err(LedgerError::EpochState(format!("unexpected completion event for epoch {epoch_index}")).into());
            }
        }

        // round-end leave-one-out scoring, then publication
        let mut records = Vec::with_capacity(uploads.len());
        for (u, (bytes, _)) in uploads.iter().zip(encoded) {
            let meta = self.chain.upload_meta(u.agent_id, epoch)?;
            self.ranks.entry(u.agent_id.to_string()).or_default().push(meta.completion_rank);
            records.push(LogRecord {
                worker_id: u.agent_id.to_string(),
                epoch_index: epoch,
                payload_kind: kind,
                sample_count: u.sample_count,
                payload: bytes,
                loo: logstore::LooMetrics { accuracy: 0.0, loss: 0.0 },
                timestamp: LogicalTime {
                    round: round as u64,
                    seq: meta.completion_rank as u64,
                },
            });
        }
        let updates: BTreeMap<String, ParamVector> = records
            .iter()
            .map(|r| Ok((r.worker_id.clone(), r.update(dim)?)))
            .collect::<Result<_, codec::CodecError>>()?;
        let weights: BTreeMap<String, u64> = records.iter().map(|r| (r.worker_id.clone(), r.sample_count)).collect();
        let loo: Vec<logstore::LooMetrics> = records
            .par_iter()
            .map(|r| {
                logstore::leave_one_out_eval(
                    &self.arch,
                    global_before,
                    &updates,
                    &weights,
                    &r.worker_id,
                    self.aggregator,
                    self.eta,
                    &self.loo_validation,
                )
            })
            .collect::<Result<_, _>>()?;
        for (mut r, m) in records.into_iter().zip(loo) {
            r.loo = m;
            self.logs.publish(r)?;
        }
        Ok(increment)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contract::gas_for_commitments;
    use crate::data::synthetic_shapes;
    use crate::fl::{run_protocol, AgentSpec, FlConfig, OracleTransport};
    use crate::nn::{Activation, Model};

    fn setup(conflict_rate: f64) -> (FlConfig, Architecture, Vec<AgentSpec>, ParamVector, ChainSettings) {
        let mut cfg = FlConfig::small_setting(3);
        cfg.rounds = 3;
        cfg.agents = 4;
        cfg.batch_size = 16;
        cfg.local_epochs = 1;
        cfg.local_lr = 0.2;
        let arch = Architecture::mlp(256, vec![8], 10, Activation::Relu);
        let data = synthetic_shapes(80, 0.2, 1);
        let agents = data
            .iid_split(4, 1)
            .into_iter()
            .enumerate()
            .map(|(i, d)| AgentSpec::new(format!("w{i}"), d, false))
            .collect();
        let init = Model::uniform_init(arch.clone(), 0.1, 2).unwrap().into_params();
        let settings = ChainSettings {
            chunk_chars: 700,
            conflict_rate,
            ..ChainSettings::default()
        };
        (cfg, arch, agents, init, settings)
    }

    fn deployment(arch: &Architecture, agents: &[AgentSpec], aggregator: Aggregator, settings: &ChainSettings) -> ChainDeployment {
        let ids: Vec<String> = agents.iter().map(|a| a.agent_id.clone()).collect();
        ChainDeployment::new(
            &ids,
            arch.clone(),
            aggregator,
            1.0,
            settings,
            &Economics::default(),
            synthetic_shapes(30, 0.2, 9),
            LogStore::in_memory(),
            3,
        )
        .unwrap()
    }

    #[test]
    fn chain_run_matches_oracle_run() {
        for aggregator in [Aggregator::FedAvg, Aggregator::SignSgd] {
            for rate in [0.0, 0.4] {
                let (cfg, arch, agents, init, settings) = setup(rate);
                let mut oracle = OracleTransport { aggregator, eta: 1.0 };
                let want = run_protocol(&cfg, &arch, init.clone(), &agents, &mut oracle).unwrap();
                let mut dep = deployment(&arch, &agents, aggregator, &settings);
                let got = run_protocol(&cfg, &arch, init, &agents, &mut dep).unwrap();
                for (a, b) in want.iter().zip(&got) {
                    assert_eq!(a.global_after, b.global_after, "{aggregator:?} rate {rate}");
                }
                if rate > 0.0 {
                    assert!(dep.stats().cached > 0);
                }
                // complete logs, one commitment per upload, and exact gas
                assert_eq!(dep.logs().record_count(), 12);
                for a in &agents {
                    assert_eq!(dep.contract().commitments(&a.agent_id).len(), 3);
                    assert_eq!(dep.contract().account(&a.agent_id).unwrap().gas_spent, gas_for_commitments(3));
                }
                assert!(dep.contract().is_conserved());
                assert_eq!(dep.latency().len(), 4);
            }
        }
    }

    #[test]
    fn commitments_match_the_chain_copy() {
        let (cfg, arch, agents, init, settings) = setup(0.0);
        let mut dep = deployment(&arch, &agents, Aggregator::FedAvg, &settings);
        let recs = run_protocol(&cfg, &arch, init, &agents, &mut dep).unwrap();
        for r in &recs {
            for (w, d) in &r.updates {
                let c = &dep.contract().commitments(w)[r.round_index];
                assert_eq!(c.digest, codec::hash_params(d, codec::PayloadKind::Float32).unwrap());
                assert_eq!(dep.chain().recompute_worker_hash(w, r.round_index as u64).unwrap(), c.digest);
            }
        }
    }

    #[test]
    fn addresses_are_stable() {
        let a = public_address("agent00");
        assert_eq!(a.len(), 42);
        assert!(a.starts_with("0x"));
        assert_eq!(a, public_address("agent00"));
        assert_ne!(a, public_address("agent01"));
    }
}
