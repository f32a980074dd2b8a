//! Upload, counter, and aggregation chaincode on top of [`Ledger`].
//!
//! Each worker owns a channel `ch-<worker>`. Batch `i` of an upload lands at
//! key `<worker><i+1 as 5 digits>`; once every batch of a worker's upload has
//! committed, the chaincode writes `<worker>-META<epoch>` recording the
//! versions that make up that epoch's payload. Aggregates go to the `agg`
//! channel under `GLOBAL<epoch>`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::mpsc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Ledger, LedgerError, Membership, Tx, TxOp, TxResult, TxStatus};
use crate::codec::{self, HashDigest, PayloadKind, WireBatch};
use crate::fl::Aggregator;
use crate::params::ParamVector;

pub const AGG_CHANNEL: &str = "agg";
pub const CHAINCODE_ID: &str = "chaincode";

pub fn worker_channel(worker: &str) -> String {
    format!("ch-{worker}")
}

pub fn batch_key(worker: &str, batch_index: usize) -> String {
    format!("{worker}{:05}", batch_index + 1)
}

pub fn meta_key(worker: &str, epoch: u64) -> String {
    format!("{worker}-META{epoch:05}")
}

pub fn global_key(epoch: u64) -> String {
    format!("GLOBAL{epoch:05}")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainConfig {
    pub dim: usize,
    pub payload_kind: PayloadKind,
    pub chunk_chars: usize,
    pub drain_retry_limit: usize,
}

impl ChainConfig {
    pub fn batch_count(&self) -> usize {
        (codec::payload_len(self.payload_kind, self.dim as u64) as usize).div_ceil(self.chunk_chars)
    }

    fn expected_chunk_len(&self, batch_index: usize) -> usize {
        let total = codec::payload_len(self.payload_kind, self.dim as u64) as usize;
        (total - batch_index * self.chunk_chars).min(self.chunk_chars)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChaincodeState {
    pub epoch_index: u64,
    pub open: bool,
    pub upload_counter: usize,
    pub expected: BTreeSet<String>,
    pub received: BTreeSet<String>,
}

impl ChaincodeState {
    pub fn aggregation_enabled(&self) -> bool {
        self.open && !self.expected.is_empty() && self.received == self.expected
    }
}

/// The on-ledger index of one worker's upload for one epoch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UploadMeta {
    pub worker_id: String,
    pub epoch_index: u64,
    pub payload_kind: PayloadKind,
    pub batch_count: usize,
    pub sample_count: u64,
    /// Ledger version of each batch key, by batch index.
    pub versions: Vec<u64>,
    /// 0 for the first worker of the epoch to complete its upload.
    pub completion_rank: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChainEvent {
    AggregationComplete {
        epoch_index: u64,
        global_key: String,
        workers: Vec<String>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GatewayOutcome {
    Committed,
    /// Hit a conflict and was parked in the cache for `cache_drain`.
    Cached,
}

#[derive(Clone, Debug)]
struct Progress {
    batch_count: usize,
    sample_count: u64,
    versions: Vec<Option<u64>>,
}

#[derive(Clone, Debug)]
struct Cached {
    worker: String,
    credential: String,
    batch: WireBatch,
}

pub struct PrivateChain {
    ledger: Ledger,
    config: ChainConfig,
    state: ChaincodeState,
    chaincode_token: String,
    progress: BTreeMap<String, Progress>,
    cache: VecDeque<Cached>,
    gateway_calls: BTreeMap<(String, u64, usize), usize>,
    subscribers: Vec<mpsc::Sender<ChainEvent>>,
    scheduler: ChaCha8Rng,
}

impl PrivateChain {
    /// Creates the `agg` channel plus one channel per member of `members`.
    pub fn new(mut members: Membership, config: ChainConfig, seed: u64) -> Result<Self, LedgerError> {
        if config.chunk_chars == 0 || config.dim == 0 {
            return Err(LedgerError::EpochState("chunk size and dim must be positive".into()));
        }
        let chaincode_token = members.issue(CHAINCODE_ID, seed ^ 0x6368_6169_6e63_6f64);
        let workers: Vec<String> = members
            .members()
            .filter(|m| *m != CHAINCODE_ID)
            .map(str::to_string)
            .collect();
        let mut ledger = Ledger::new(members);
        ledger.create_channel(AGG_CHANNEL);
        for w in &workers {
            ledger.create_channel(&worker_channel(w));
        }
        Ok(Self {
            ledger,
            config,
            state: ChaincodeState::default(),
            chaincode_token,
            progress: BTreeMap::new(),
            cache: VecDeque::new(),
            gateway_calls: BTreeMap::new(),
            subscribers: Vec::new(),
            scheduler: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Reassembles a chain from persisted parts, for read-only audit use.
    pub fn from_parts(ledger: Ledger, config: ChainConfig, state: ChaincodeState) -> Self {
        Self {
            ledger,
            config,
            state,
            chaincode_token: String::new(),
            progress: BTreeMap::new(),
            cache: VecDeque::new(),
            gateway_calls: BTreeMap::new(),
            subscribers: Vec::new(),
            scheduler: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn ledger_mut(&mut self) -> &mut Ledger {
        &mut self.ledger
    }

    pub fn config(&self) -> &ChainConfig {
        &self.config
    }

    pub fn state(&self) -> &ChaincodeState {
        &self.state
    }

    pub fn subscribe(&mut self) -> mpsc::Receiver<ChainEvent> {
        let (tx, rx) = mpsc::channel();
        self.subscribers.push(tx);
        rx
    }

    pub fn open_epoch(&mut self, expected: BTreeSet<String>) -> Result<u64, LedgerError> {
        if self.state.open {
            return Err(LedgerError::EpochState(format!(
                "epoch {} is still open",
                self.state.epoch_index
            )));
        }
        if expected.is_empty() {
            return Err(LedgerError::EpochState("no expected workers".into()));
        }
        for w in &expected {
            if !self.ledger.members().contains(w) {
                return Err(LedgerError::EpochState(format!("{w} is not a member")));
            }
        }
        self.state.open = true;
        self.state.expected = expected;
        self.state.received.clear();
        self.state.upload_counter = 0;
        self.progress.clear();
        Ok(self.state.epoch_index)
    }

    fn check_batch(&self, worker: &str, batch: &WireBatch) -> Result<(), String> {
        if batch.worker_id != worker {
            return Err(format!("batch belongs to {}, submitted by {worker}", batch.worker_id));
        }
        if !self.state.open || batch.epoch_index != self.state.epoch_index {
            return Err(format!(
                "epoch {} is not open for uploads",
                batch.epoch_index
            ));
        }
        if !self.state.expected.contains(worker) {
            return Err(format!("{worker} is not a participant of this epoch"));
        }
        if self.state.received.contains(worker) {
            return Err(format!("{worker} already uploaded in epoch {}", batch.epoch_index));
        }
        if batch.payload_kind != self.config.payload_kind {
            return Err(format!("payload kind {} not accepted", batch.payload_kind));
        }
        let count = self.config.batch_count();
        if batch.batch_count != count || batch.batch_index >= count {
            return Err(format!(
                "batch {}/{} does not fit the expected {count} batches",
                batch.batch_index, batch.batch_count
            ));
        }
        let want = self.config.expected_chunk_len(batch.batch_index);
        if batch.payload.len() != want {
            return Err(format!(
                "batch {} carries {} chars, expected {want}",
                batch.batch_index,
                batch.payload.len()
            ));
        }
        if batch.sample_count == 0 {
            return Err("sample count must be positive".into());
        }
        if let Some(p) = self.progress.get(worker) {
            if p.sample_count != batch.sample_count {
                return Err("sample count differs from earlier batches".into());
            }
            if p.versions[batch.batch_index].is_some() {
                return Err(format!("batch {} already committed", batch.batch_index));
            }
        }
        Ok(())
    }

    fn batch_tx(worker: &str, credential: &str, batch: &WireBatch) -> Tx {
        Tx {
            submitter: worker.to_string(),
            credential: credential.to_string(),
            ops: vec![TxOp::Put {
                key: batch_key(worker, batch.batch_index),
                value: batch.payload.clone(),
            }],
        }
    }

    fn rejected(&mut self, worker: &str, detail: String) -> TxResult {
        self.ledger.reject(&worker_channel(worker), worker, detail)
    }

    /// Submits one batch. On the worker's last outstanding batch the upload
    /// is indexed and the counter advances.
    pub fn upload_batch(
        &mut self,
        worker: &str,
        credential: &str,
        batch: &WireBatch,
    ) -> Result<TxResult, LedgerError> {
        if let Err(detail) = self.check_batch(worker, batch) {
            return Ok(self.rejected(worker, detail));
        }
        let res = self.ledger.submit(&worker_channel(worker), &Self::batch_tx(worker, credential, batch));
        self.after_commit(worker, batch, &res)?;
        Ok(res)
    }

    /// Submits a block of batches concurrently: all simulate against one
    /// snapshot and commit in a scheduler-drawn order.
    pub fn upload_concurrent(
        &mut self,
        items: &[(String, String, WireBatch)],
    ) -> Result<Vec<TxResult>, LedgerError> {
        let mut results: Vec<Option<TxResult>> = vec![None; items.len()];
        let mut txs = Vec::new();
        let mut slots = Vec::new();
        for (i, (worker, cred, batch)) in items.iter().enumerate() {
            match self.check_batch(worker, batch) {
                Ok(()) => {
                    txs.push((worker_channel(worker), Self::batch_tx(worker, cred, batch)));
                    slots.push(i);
                }
                Err(detail) => results[i] = Some(self.rejected(worker, detail)),
            }
        }
        let committed = self.ledger.submit_concurrent(&txs, &mut self.scheduler);
        // index uploads in commit order so completion ranks follow the schedule
        let mut order: Vec<usize> = (0..committed.len()).collect();
        order.sort_by_key(|&j| committed[j].tx_id);
        for j in order {
            let i = slots[j];
            self.after_commit(&items[i].0, &items[i].2, &committed[j])?;
        }
        for (j, r) in committed.into_iter().enumerate() {
            results[slots[j]] = Some(r);
        }
        Ok(results.into_iter().map(|r| r.expect("result per item")).collect())
    }

    fn after_commit(&mut self, worker: &str, batch: &WireBatch, res: &TxResult) -> Result<(), LedgerError> {
        if res.status != TxStatus::Committed {
            return Ok(());
        }
        let version = res.write_set[0].1;
        let p = self.progress.entry(worker.to_string()).or_insert_with(|| Progress {
            batch_count: batch.batch_count,
            sample_count: batch.sample_count,
            versions: vec![None; batch.batch_count],
        });
        p.versions[batch.batch_index] = Some(version);
        if p.versions.iter().all(Option::is_some) {
            let meta = UploadMeta {
                worker_id: worker.to_string(),
                epoch_index: self.state.epoch_index,
                payload_kind: batch.payload_kind,
                batch_count: p.batch_count,
                sample_count: p.sample_count,
                versions: p.versions.iter().map(|v| v.expect("all present")).collect(),
                completion_rank: self.state.received.len(),
            };
            let value = serde_json::to_string(&meta).map_err(std::io::Error::from)?;
            self.chaincode_write(&worker_channel(worker), meta_key(worker, meta.epoch_index), value)?;
            self.state.received.insert(worker.to_string());
            self.state.upload_counter = self.state.received.len();
        }
        Ok(())
    }

    fn chaincode_write(&mut self, channel: &str, key: String, value: String) -> Result<(), LedgerError> {
        let tx = Tx {
            submitter: CHAINCODE_ID.to_string(),
            credential: self.chaincode_token.clone(),
            ops: vec![TxOp::Put { key, value }],
        };
        for _ in 0..self.config.drain_retry_limit.max(1) {
            let r = self.ledger.submit(channel, &tx);
            match r.status {
                TxStatus::Committed => return Ok(()),
                TxStatus::MvccConflict => continue,
                TxStatus::Rejected => {
                    return Err(LedgerError::Tx(r.error_detail.unwrap_or_default()));
                }
            }
        }
        Err(LedgerError::Tx(format!("chaincode write on {channel} kept conflicting")))
    }

    fn count_gateway_call(&mut self, worker: &str, batch: &WireBatch) {
        *self
            .gateway_calls
            .entry((worker.to_string(), batch.epoch_index, batch.batch_index))
            .or_default() += 1;
    }

    /// The worker-facing entry point: upload once, and let the cache retry.
    pub fn gateway_upload(
        &mut self,
        worker: &str,
        credential: &str,
        batch: &WireBatch,
    ) -> Result<GatewayOutcome, LedgerError> {
        self.count_gateway_call(worker, batch);
        let r = self.upload_batch(worker, credential, batch)?;
        self.route(worker, credential, batch, r)
    }

    /// Gateway entry for a concurrent block of uploads.
    pub fn gateway_upload_concurrent(
        &mut self,
        items: &[(String, String, WireBatch)],
    ) -> Result<Vec<GatewayOutcome>, LedgerError> {
        for (w, _, b) in items {
            self.count_gateway_call(w, b);
        }
        let results = self.upload_concurrent(items)?;
        items
            .iter()
            .zip(results)
            .map(|((w, c, b), r)| self.route(w, c, b, r))
            .collect()
    }

    fn route(
        &mut self,
        worker: &str,
        credential: &str,
        batch: &WireBatch,
        r: TxResult,
    ) -> Result<GatewayOutcome, LedgerError> {
        match r.status {
            TxStatus::Committed => Ok(GatewayOutcome::Committed),
            TxStatus::MvccConflict => {
                self.cache_put(worker, credential, batch.clone());
                Ok(GatewayOutcome::Cached)
            }
            TxStatus::Rejected => Err(LedgerError::Tx(r.error_detail.unwrap_or_default())),
        }
    }

    /// Times the worker-facing API was called for `(worker, epoch, batch)`.
    pub fn gateway_calls(&self, worker: &str, epoch: u64, batch_index: usize) -> usize {
        self.gateway_calls
            .get(&(worker.to_string(), epoch, batch_index))
            .copied()
            .unwrap_or(0)
    }

    pub fn cache_put(&mut self, worker: &str, credential: &str, batch: WireBatch) {
        self.cache.push_back(Cached {
            worker: worker.to_string(),
            credential: credential.to_string(),
            batch,
        });
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    /// Resubmits cached batches in FIFO order until each commits.
    pub fn cache_drain(&mut self) -> Result<Vec<TxResult>, LedgerError> {
        let mut out = Vec::new();
        while let Some(c) = self.cache.pop_front() {
            let mut attempts = 0;
            loop {
                attempts += 1;
                let r = self.upload_batch(&c.worker, &c.credential, &c.batch)?;
                match r.status {
                    TxStatus::Committed => {
                        out.push(r);
                        break;
                    }
                    TxStatus::Rejected => {
                        return Err(LedgerError::Tx(r.error_detail.unwrap_or_default()));
                    }
                    TxStatus::MvccConflict if attempts >= self.config.drain_retry_limit => {
                        return Err(LedgerError::RetryLimit {
                            worker: c.worker,
                            batch_index: c.batch.batch_index,
                            attempts,
                        });
                    }
                    TxStatus::MvccConflict => {}
                }
            }
        }
        Ok(out)
    }

    pub fn upload_meta(&self, worker: &str, epoch: u64) -> Result<UploadMeta, LedgerError> {
        let integrity = |detail: String| LedgerError::Integrity {
            worker: worker.to_string(),
            epoch,
            detail,
        };
        let entry = self
            .ledger
            .get(&worker_channel(worker), &meta_key(worker, epoch))?
            .ok_or_else(|| integrity("no upload index on the ledger".into()))?;
        let meta: UploadMeta =
            serde_json::from_str(&entry.value).map_err(|e| integrity(format!("bad upload index: {e}")))?;
        if meta.versions.len() != meta.batch_count {
            return Err(integrity("upload index is inconsistent".into()));
        }
        Ok(meta)
    }

    /// The full text payload a worker uploaded in `epoch`.
    pub fn reassemble(&self, worker: &str, epoch: u64) -> Result<(UploadMeta, String), LedgerError> {
        let meta = self.upload_meta(worker, epoch)?;
        let channel = worker_channel(worker);
        let mut payload = String::new();
        for (batch_index, &v) in meta.versions.iter().enumerate() {
            let e = self
                .ledger
                .entry_at(&channel, &batch_key(worker, batch_index), v)?
                .ok_or_else(|| LedgerError::MissingShard {
                    worker: worker.to_string(),
                    epoch,
                    batch_index,
                })?;
            payload.push_str(&e.value);
        }
        Ok((meta, payload))
    }

    fn canonical(&self, worker: &str, epoch: u64) -> Result<(UploadMeta, Vec<u8>), LedgerError> {
        let (meta, payload) = self.reassemble(worker, epoch)?;
        let bytes = codec::payload_to_canonical_bytes(&payload, meta.payload_kind, self.config.dim)
            .map_err(|e| LedgerError::Integrity {
                worker: worker.to_string(),
                epoch,
                detail: format!("payload does not decode: {e}"),
            })?;
        Ok((meta, bytes))
    }

    /// SHA-256 of the canonical bytes reassembled from the ledger.
    pub fn recompute_worker_hash(&self, worker: &str, epoch: u64) -> Result<HashDigest, LedgerError> {
        Ok(codec::hash_bytes(&self.canonical(worker, epoch)?.1))
    }

    /// The decoded update a worker uploaded in `epoch`.
    pub fn decoded_update(&self, worker: &str, epoch: u64) -> Result<(UploadMeta, ParamVector), LedgerError> {
        let (meta, payload) = self.reassemble(worker, epoch)?;
        let v = codec::decode_payload(&payload, meta.payload_kind, self.config.dim).map_err(|e| {
            LedgerError::Integrity {
                worker: worker.to_string(),
                epoch,
                detail: format!("payload does not decode: {e}"),
            }
        })?;
        Ok((meta, v))
    }

    /// Aggregates every expected worker's upload for the open epoch, stores
    /// the increment under `GLOBAL<epoch>`, notifies subscribers, and closes
    /// the epoch.
    pub fn aggregate(&mut self, epoch: u64, aggregator: Aggregator, eta: f64) -> Result<ParamVector, LedgerError> {
        if !self.state.open || epoch != self.state.epoch_index {
            return Err(LedgerError::EpochState(format!("epoch {epoch} is not open")));
        }
        if !self.state.aggregation_enabled() {
            return Err(LedgerError::NotEnabled {
                received: self.state.received.len(),
                expected: self.state.expected.len(),
            });
        }
        assert_eq!(self.state.upload_counter, self.state.expected.len());
        if aggregator.payload_kind() != self.config.payload_kind {
            return Err(LedgerError::EpochState(format!(
                "{} needs {} payloads",
                aggregator.as_str(),
                aggregator.payload_kind()
            )));
        }

        let dim = self.config.dim;
        let workers: Vec<String> = self.state.expected.iter().cloned().collect();
        let increment: Vec<f32> = match aggregator {
            Aggregator::FedAvg => {
                let mut acc = vec![0.0f64; dim];
                let mut total = 0.0f64;
                for w in &workers {
                    let (meta, v) = self.decoded_update(w, epoch)?;
                    let n = meta.sample_count as f64;
                    total += n;
                    for (a, &x) in acc.iter_mut().zip(v.as_slice()) {
                        *a += n * f64::from(x);
                    }
                }
                acc.iter().map(|a| (eta * (a / total)) as f32).collect()
            }
            Aggregator::SignSgd => {
                let mut votes = vec![0i64; dim];
                for w in &workers {
                    let (_, bytes) = self.canonical(w, epoch)?;
                    let bits = codec::SignBits::from_bytes(bytes, dim)?;
                    for (v, b) in votes.iter_mut().zip(bits.iter()) {
                        *v += if b { 1 } else { -1 };
                    }
                }
                let eta = eta as f32;
                votes.iter().map(|&v| if v >= 0 { eta } else { -eta }).collect()
            }
        };
        let increment = ParamVector::new(increment);
        let text = codec::encode_payload(&increment, PayloadKind::Float32)?;
        let key = global_key(epoch);
        self.chaincode_write(AGG_CHANNEL, key.clone(), text)?;

        let event = ChainEvent::AggregationComplete {
            epoch_index: epoch,
            global_key: key,
            workers,
        };
        self.subscribers.retain(|s| s.send(event.clone()).is_ok());

        self.state.open = false;
        self.state.upload_counter = 0;
        self.state.received.clear();
        self.state.expected.clear();
        self.state.epoch_index += 1;
        self.progress.clear();
        Ok(increment)
    }

    /// The increment stored for `epoch`.
    pub fn global_increment(&self, epoch: u64) -> Result<ParamVector, LedgerError> {
        let entry = self
            .ledger
            .get(AGG_CHANNEL, &global_key(epoch))?
            .ok_or_else(|| LedgerError::EpochState(format!("no aggregate for epoch {epoch}")))?;
        Ok(codec::decode_payload(&entry.value, PayloadKind::Float32, self.config.dim)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fl::{fedavg_oracle, sign_agg_oracle};

    fn chain(workers: &[&str], dim: usize, kind: PayloadKind, chunk: usize) -> (PrivateChain, BTreeMap<String, String>) {
        let mut m = Membership::default();
        let tokens = workers
            .iter()
            .map(|w| (w.to_string(), m.issue(w, 7)))
            .collect();
        let cfg = ChainConfig {
            dim,
            payload_kind: kind,
            chunk_chars: chunk,
            drain_retry_limit: 64,
        };
        (PrivateChain::new(m, cfg, 1).unwrap(), tokens)
    }

    fn upload_all(c: &mut PrivateChain, tok: &BTreeMap<String, String>, w: &str, delta: &ParamVector, n: u64) {
        let kind = c.config().payload_kind;
        let payload = codec::encode_payload(delta, kind).unwrap();
        let epoch = c.state().epoch_index;
        for b in WireBatch::split(w, epoch, n, kind, &payload, c.config().chunk_chars) {
            let r = c.upload_batch(w, &tok[w], &b).unwrap();
            assert!(r.is_committed(), "{r:?}");
        }
    }

    #[test]
    fn three_batches_land_on_sharded_keys() {
        let (mut c, tok) = chain(&["A"], 3, PayloadKind::Float32, 8);
        c.open_epoch(["A".to_string()].into()).unwrap();
        upload_all(&mut c, &tok, "A", &ParamVector::new(vec![1.0, 2.0, 3.0]), 5);
        let ch = worker_channel("A");
        for k in ["A00001", "A00002", "A00003"] {
            assert_eq!(c.ledger().get(&ch, k).unwrap().unwrap().value.len(), 8);
        }
        assert!(c.ledger().get(&ch, "A00004").unwrap().is_none());
        assert!(c.state().aggregation_enabled());
    }

    #[test]
    fn second_upload_in_same_epoch_is_rejected() {
        let (mut c, tok) = chain(&["A", "B"], 4, PayloadKind::SignBits, 100);
        c.open_epoch(["A".to_string(), "B".to_string()].into()).unwrap();
        let d = ParamVector::new(vec![1.0, -1.0, 1.0, 1.0]);
        upload_all(&mut c, &tok, "A", &d, 1);
        let payload = codec::encode_payload(&d, PayloadKind::SignBits).unwrap();
        let b = WireBatch::split("A", 0, 1, PayloadKind::SignBits, &payload, 100);
        let r = c.upload_batch("A", &tok["A"], &b[0]).unwrap();
        assert_eq!(r.status, TxStatus::Rejected);
        assert!(!c.state().aggregation_enabled());
    }

    #[test]
    fn counter_reaches_four_and_enables_aggregation() {
        let ws = ["A", "B", "C", "D"];
        let (mut c, tok) = chain(&ws, 10, PayloadKind::Float32, 16);
        c.open_epoch(ws.iter().map(|w| w.to_string()).collect()).unwrap();
        for (i, w) in ws.iter().enumerate() {
            assert!(matches!(c.aggregate(0, Aggregator::FedAvg, 1.0), Err(LedgerError::NotEnabled { .. })));
            upload_all(&mut c, &tok, w, &ParamVector::new(vec![i as f32; 10]), 1);
            assert_eq!(c.state().upload_counter, i + 1);
        }
        assert!(c.state().aggregation_enabled());
        let rx = c.subscribe();
        let inc = c.aggregate(0, Aggregator::FedAvg, 1.0).unwrap();
        assert_eq!(inc.as_slice(), &[1.5; 10]);
        assert!(matches!(rx.try_recv(), Ok(ChainEvent::AggregationComplete { epoch_index: 0, .. })));
        assert_eq!(c.state().upload_counter, 0);
        assert_eq!(c.global_increment(0).unwrap(), inc);
    }

    #[test]
    fn malformed_batches_are_rejected() {
        let (mut c, tok) = chain(&["A", "B"], 4, PayloadKind::Float32, 10);
        c.open_epoch(["A".to_string()].into()).unwrap();
        let good = WireBatch::split("A", 0, 1, PayloadKind::Float32, &"0".repeat(32), 10);
        let mut short = good[0].clone();
        short.payload.pop();
        assert_eq!(c.upload_batch("A", &tok["A"], &short).unwrap().status, TxStatus::Rejected);
        let mut kind = good[0].clone();
        kind.payload_kind = PayloadKind::SignBits;
        assert_eq!(c.upload_batch("A", &tok["A"], &kind).unwrap().status, TxStatus::Rejected);
        assert_eq!(c.upload_batch("A", "forged", &good[0]).unwrap().status, TxStatus::Rejected);
        let other = WireBatch::split("B", 0, 1, PayloadKind::Float32, &"0".repeat(32), 10);
        assert_eq!(c.upload_batch("B", &tok["B"], &other[0]).unwrap().status, TxStatus::Rejected);
    }

    #[test]
    fn chain_aggregates_match_the_oracles() {
        let ws = ["A", "B", "C"];
        let updates: BTreeMap<String, ParamVector> = ws
            .iter()
            .enumerate()
            .map(|(i, w)| (w.to_string(), ParamVector::new(vec![0.1 * i as f32 - 0.1, -0.3, 0.0, 1e-3 * i as f32])))
            .collect();
        let weights: BTreeMap<String, u64> = ws.iter().enumerate().map(|(i, w)| (w.to_string(), 10 + i as u64)).collect();
        for agg in [Aggregator::FedAvg, Aggregator::SignSgd] {
            let (mut c, tok) = chain(&ws, 4, agg.payload_kind(), 5);
            c.open_epoch(ws.iter().map(|w| w.to_string()).collect()).unwrap();
            for w in ws {
                upload_all(&mut c, &tok, w, &updates[w], weights[w]);
            }
            let got = c.aggregate(0, agg, 0.5).unwrap();
            let want = match agg {
                Aggregator::FedAvg => fedavg_oracle(&updates, &weights, 0.5).unwrap(),
                Aggregator::SignSgd => sign_agg_oracle(&updates, 0.5).unwrap(),
            };
            assert_eq!(got, want, "{agg:?}");
        }
    }

    #[test]
    fn recomputed_hash_ignores_chunking_and_detects_tampering() {
        let d = ParamVector::new(vec![0.25, -1.5, 3.0, 8.0, -0.0]);
        let direct = codec::hash_params(&d, PayloadKind::Float32).unwrap();
        for chunk in [1, 7, 13, 40, 1000] {
            let (mut c, tok) = chain(&["A"], 5, PayloadKind::Float32, chunk);
            c.open_epoch(["A".to_string()].into()).unwrap();
            upload_all(&mut c, &tok, "A", &d, 3);
            assert_eq!(c.recompute_worker_hash("A", 0).unwrap(), direct);
            let ch = worker_channel("A");
            let v = c.ledger().version(&ch, "A00001").unwrap();
            let mut val = c.ledger().get(&ch, "A00001").unwrap().unwrap().value.clone();
            let flipped = if val.starts_with('0') { "1" } else { "0" };
            val.replace_range(0..1, flipped);
            assert!(c.ledger_mut().tamper_for_test(&ch, "A00001", v, val));
            assert_ne!(c.recompute_worker_hash("A", 0).unwrap(), direct);
        }
    }

    #[test]
    fn injected_conflicts_recover_through_the_cache() {
        let ws = ["A", "B"];
        let d = ParamVector::new((0..50).map(|i| i as f32 * 0.01 - 0.2).collect());
        let (mut reference, tok) = chain(&ws, 50, PayloadKind::Float32, 37);
        reference.open_epoch(ws.iter().map(|w| w.to_string()).collect()).unwrap();
        for w in ws {
            upload_all(&mut reference, &tok, w, &d, 4);
        }

        let (mut c, _) = chain(&ws, 50, PayloadKind::Float32, 37);
        c.ledger_mut().inject_conflicts(0.5, 99);
        c.open_epoch(ws.iter().map(|w| w.to_string()).collect()).unwrap();
        let payload = codec::encode_payload(&d, PayloadKind::Float32).unwrap();
        let mut cached = 0;
        for w in ws {
            for b in WireBatch::split(w, 0, 4, PayloadKind::Float32, &payload, 37) {
                if c.gateway_upload(w, &tok[w], &b).unwrap() == GatewayOutcome::Cached {
                    cached += 1;
                }
            }
        }
        assert!(cached > 0);
        assert!(c.cache_drain().unwrap().len() == cached);
        assert!(c.cache_drain().unwrap().is_empty());
        for w in ws {
            for i in 0..c.config().batch_count() {
                assert_eq!(c.gateway_calls(w, 0, i), 1);
            }
        }
        let strip = |s: BTreeMap<(String, String), (u64, String)>| {
            s.into_iter()
                .map(|(k, (v, val))| {
                    // completion order may differ between the runs
                    let val = if k.1.contains("-META") {
                        let mut m: UploadMeta = serde_json::from_str(&val).unwrap();
                        m.completion_rank = 0;
                        serde_json::to_string(&m).unwrap()
                    } else {
                        val
                    };
                    (k, (v, val))
                })
                .collect::<BTreeMap<_, _>>()
        };
        assert_eq!(strip(c.ledger().state_snapshot()), strip(reference.ledger().state_snapshot()));
        assert_eq!(c.ledger().serial_replay().unwrap(), c.ledger().state_snapshot());
    }
}
