//! Per-worker log publication with one-time access grants.
//!
//! Records are immutable once published. Payloads leave the store only
//! through [`LogStore::fetch_logs`] with an unconsumed grant; the orchestrator
//! that writes the logs may also read them back for leave-one-out scoring.
//!
//! On disk each record is `<root>/<worker>/<epoch:05>.rec`: text header lines
//! `name: value`, a blank line, then exactly `payload_bytes` raw bytes. The
//! top-level `MANIFEST` has one `worker epoch digest path` line per record.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, CodecError, HashDigest, PayloadKind, SignBits};
use crate::data::LabeledDataset;
use crate::fl::{aggregate_oracle, AggError, Aggregator};
use crate::nn::{Architecture, Model, NnError};
use crate::params::ParamVector;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("record for {worker} epoch {epoch} already exists")]
    Duplicate { worker: String, epoch: u64 },
    #[error("access denied: {0}")]
    AccessDenied(String),
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("corrupt record {path}: {detail}")]
    Corrupt { path: String, detail: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Agg(#[from] AggError),
}

/// Validation accuracy and loss of the model aggregated without one worker.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LooMetrics {
    pub accuracy: f64,
    pub loss: f64,
}

/// A logical `(round, sequence)` timestamp.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LogicalTime {
    pub round: u64,
    pub seq: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub worker_id: String,
    pub epoch_index: u64,
    pub payload_kind: PayloadKind,
    pub sample_count: u64,
    /// Canonical wire bytes of the update.
    pub payload: Vec<u8>,
    pub loo: LooMetrics,
    pub timestamp: LogicalTime,
}

impl LogRecord {
    pub fn digest(&self) -> HashDigest {
        codec::hash_bytes(&self.payload)
    }

    /// The update as the aggregator sees it: float32 values, or `+-1` signs.
    pub fn update(&self, dim: usize) -> Result<ParamVector, CodecError> {
        match self.payload_kind {
            PayloadKind::Float32 => {
                let v = codec::deserialize_float32(&self.payload)?;
                if v.dim() != dim {
                    return Err(CodecError::Length {
                        expected: dim * 4,
                        actual: self.payload.len(),
                    });
                }
                Ok(v)
            }
            PayloadKind::SignBits => Ok(SignBits::from_bytes(self.payload.clone(), dim)?.to_signs()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub worker_id: String,
    pub epoch_index: u64,
    pub digest: HashDigest,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessGrant {
    pub grant_id: u64,
    pub claim_id: u64,
    pub worker_id: String,
    pub consumed: bool,
}

enum Backend {
    Memory(BTreeMap<(String, u64), LogRecord>),
    Disk {
        root: PathBuf,
        index: BTreeSet<(String, u64)>,
    },
}

pub struct LogStore {
    backend: Backend,
    grants: Vec<AccessGrant>,
}

fn record_path(root: &Path, worker: &str, epoch: u64) -> PathBuf {
    root.join(worker).join(format!("{epoch:05}.rec"))
}

fn encode_record(r: &LogRecord) -> Vec<u8> {
    let mut out = format!(
        "worker: {}\nepoch: {}\nkind: {}\nsample_count: {}\ndigest: {}\nloo_accuracy: {:?}\nloo_loss: {:?}\ntimestamp: {}.{}\npayload_bytes: {}\n\n",
        r.worker_id,
        r.epoch_index,
        r.payload_kind,
        r.sample_count,
        r.digest(),
        r.loo.accuracy,
        r.loo.loss,
        r.timestamp.round,
        r.timestamp.seq,
        r.payload.len()
    )
    .into_bytes();
    out.extend_from_slice(&r.payload);
    out
}

fn decode_record(path: &Path, bytes: &[u8]) -> Result<LogRecord, LogError> {
    let corrupt = |detail: &str| LogError::Corrupt {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };
    let split = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| corrupt("no header terminator"))?;
    let header = std::str::from_utf8(&bytes[..split]).map_err(|_| corrupt("header is not utf-8"))?;
    let payload = bytes[split + 2..].to_vec();
    let mut fields = BTreeMap::new();
    for line in header.lines() {
        let (k, v) = line.split_once(": ").ok_or_else(|| corrupt("bad header line"))?;
        fields.insert(k, v);
    }
    let field = |k: &str| fields.get(k).copied().ok_or_else(|| corrupt(&format!("missing {k}")));
    let num = |k: &str| -> Result<u64, LogError> { field(k)?.parse().map_err(|_| corrupt(&format!("bad {k}"))) };
    let real = |k: &str| -> Result<f64, LogError> { field(k)?.parse().map_err(|_| corrupt(&format!("bad {k}"))) };
    let kind = match field("kind")? {
        "float32" => PayloadKind::Float32,
        "sign-bits" => PayloadKind::SignBits,
        _ => return Err(corrupt("bad kind")),
    };
    let (round, seq) = field("timestamp")?
        .split_once('.')
        .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
        .ok_or_else(|| corrupt("bad timestamp"))?;
    if num("payload_bytes")? != payload.len() as u64 {
        return Err(corrupt("payload length differs from header"));
    }
    let rec = LogRecord {
        worker_id: field("worker")?.to_string(),
        epoch_index: num("epoch")?,
        payload_kind: kind,
        sample_count: num("sample_count")?,
        payload,
        loo: LooMetrics {
            accuracy: real("loo_accuracy")?,
            loss: real("loo_loss")?,
        },
        timestamp: LogicalTime { round, seq },
    };
    if rec.digest().as_str() != field("digest")? {
        return Err(corrupt("payload digest differs from header"));
    }
    Ok(rec)
}

impl LogStore {
    pub fn in_memory() -> Self {
        Self {
            backend: Backend::Memory(BTreeMap::new()),
            grants: Vec::new(),
        }
    }

    /// A directory-backed store. Existing records listed in `MANIFEST` are
    /// picked up, so a finished run's logs can be reopened for audit.
    pub fn on_disk(root: impl Into<PathBuf>) -> Result<Self, LogError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let mut index = BTreeSet::new();
        let manifest = root.join("MANIFEST");
        if manifest.exists() {
            for line in fs::read_to_string(&manifest)?.lines() {
                let parts: Vec<&str> = line.split(' ').collect();
                let epoch = parts.get(1).and_then(|e| e.parse().ok());
                match (parts.len(), epoch) {
                    (4, Some(epoch)) => {
                        index.insert((parts[0].to_string(), epoch));
                    }
                    _ => {
                        return Err(LogError::Corrupt {
                            path: manifest.display().to_string(),
                            detail: format!("bad line {line:?}"),
                        })
                    }
                }
            }
        }
        Ok(Self {
            backend: Backend::Disk { root, index },
            grants: Vec::new(),
        })
    }

    pub fn record_count(&self) -> usize {
        match &self.backend {
            Backend::Memory(m) => m.len(),
            Backend::Disk { index, .. } => index.len(),
        }
    }

    /// `(worker, epoch)` of every stored record.
    pub fn keys(&self) -> Vec<(String, u64)> {
        match &self.backend {
            Backend::Memory(m) => m.keys().cloned().collect(),
            Backend::Disk { index, .. } => index.iter().cloned().collect(),
        }
    }

    pub fn publish(&mut self, record: LogRecord) -> Result<Receipt, LogError> {
        let key = (record.worker_id.clone(), record.epoch_index);
        let receipt = Receipt {
            worker_id: record.worker_id.clone(),
            epoch_index: record.epoch_index,
            digest: record.digest(),
        };
        let dup = || LogError::Duplicate {
            worker: key.0.clone(),
            epoch: key.1,
        };
        match &mut self.backend {
            Backend::Memory(m) => {
                if m.contains_key(&key) {
                    return Err(dup());
                }
                m.insert(key.clone(), record);
            }
            Backend::Disk { root, index } => {
                if index.contains(&key) {
                    return Err(dup());
                }
                let path = record_path(root, &key.0, key.1);
                fs::create_dir_all(path.parent().expect("has parent"))?;
                let mut f = fs::OpenOptions::new()
                    .write(true)
                    .create_new(true)
                    .open(&path)
                    .map_err(|e| match e.kind() {
                        std::io::ErrorKind::AlreadyExists => dup(),
                        _ => e.into(),
                    })?;
                f.write_all(&encode_record(&record))?;
                let mut m = fs::OpenOptions::new()
                    .append(true)
                    .create(true)
                    .open(root.join("MANIFEST"))?;
                writeln!(m, "{} {} {} {}/{:05}.rec", key.0, key.1, receipt.digest, key.0, key.1)?;
                index.insert(key.clone());
            }
        }
        Ok(receipt)
    }

    fn read(&self, worker: &str, epoch: u64) -> Result<Option<LogRecord>, LogError> {
        match &self.backend {
            Backend::Memory(m) => Ok(m.get(&(worker.to_string(), epoch)).cloned()),
            Backend::Disk { root, index } => {
                if !index.contains(&(worker.to_string(), epoch)) {
                    return Ok(None);
                }
                let path = record_path(root, worker, epoch);
                let bytes = fs::read(&path)?;
                decode_record(&path, &bytes).map(Some)
            }
        }
    }

    /// Every record of `worker`, ascending by epoch.
    fn read_worker(&self, worker: &str) -> Result<Vec<LogRecord>, LogError> {
        self.keys()
            .into_iter()
            .filter(|(w, _)| w == worker)
            .map(|(w, e)| self.read(&w, e).map(|r| r.expect("indexed")))
            .collect()
    }

    /// Copies every record into `dest` in key order; grants are not copied.
    pub fn export_into(&self, dest: &mut LogStore) -> Result<usize, LogError> {
        let keys = self.keys();
        for (w, e) in &keys {
            dest.publish(self.read(w, *e)?.expect("indexed"))?;
        }
        Ok(keys.len())
    }

    pub fn grant_access(&mut self, claim_id: u64, subject: &str) -> AccessGrant {
        let g = AccessGrant {
            grant_id: self.grants.len() as u64,
            claim_id,
            worker_id: subject.to_string(),
            consumed: false,
        };
        self.grants.push(g.clone());
        g
    }

    /// Consumes the grant, then returns the subject's records.
    pub fn fetch_logs(&mut self, grant_id: u64) -> Result<Vec<LogRecord>, LogError> {
        let g = self
            .grants
            .get_mut(grant_id as usize)
            .ok_or_else(|| LogError::AccessDenied(format!("unknown grant {grant_id}")))?;
        if g.consumed {
            return Err(LogError::AccessDenied(format!("grant {grant_id} already used")));
        }
        g.consumed = true;
        let subject = g.worker_id.clone();
        self.read_worker(&subject)
    }

    pub fn grants(&self) -> &[AccessGrant] {
        &self.grants
    }

    /// Orchestrator-side scoring: aggregates `epoch`'s logged updates
    /// without `exclude`, applies them to `global_before`, and evaluates.
    #[allow(clippy::too_many_arguments)]
    pub fn leave_one_out_eval(
        &self,
        epoch: u64,
        exclude: &str,
        arch: &Architecture,
        global_before: &ParamVector,
        aggregator: Aggregator,
        eta: f64,
        validation: &LabeledDataset,
    ) -> Result<LooMetrics, LogError> {
        let mut updates = BTreeMap::new();
        let mut weights = BTreeMap::new();
        for (w, e) in self.keys() {
            if e != epoch {
                continue;
            }
            let r = self.read(&w, e)?.expect("indexed");
            updates.insert(w.clone(), r.update(arch.param_count())?);
            weights.insert(w, r.sample_count);
        }
        leave_one_out_eval(arch, global_before, &updates, &weights, exclude, aggregator, eta, validation)
    }
}

/// Scores the model aggregated from `updates` minus `exclude`. With nobody
/// left the increment is zero and `global_before` itself is scored.
#[allow(clippy::too_many_arguments)]
pub fn leave_one_out_eval(
    arch: &Architecture,
    global_before: &ParamVector,
    updates: &BTreeMap<String, ParamVector>,
    weights: &BTreeMap<String, u64>,
    exclude: &str,
    aggregator: Aggregator,
    eta: f64,
    validation: &LabeledDataset,
) -> Result<LooMetrics, LogError> {
    if !updates.contains_key(exclude) {
        return Err(LogError::Integrity(format!("no update from {exclude} to exclude")));
    }
    let mut rest = updates.clone();
    rest.remove(exclude);
    let params = if rest.is_empty() {
        global_before.clone()
    } else {
        global_before.add(&aggregate_oracle(aggregator, &rest, weights, eta)?)?
    };
    let model = Model::new(arch.clone(), params)?;
    Ok(LooMetrics {
        accuracy: model.accuracy(validation)?,
        loss: model.loss(validation)?,
    })
}
