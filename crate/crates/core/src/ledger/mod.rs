//! A simulated permissioned ledger: channels of versioned keys with
//! simulate-then-commit MVCC validation.
//!
//! Every key has a version that starts at 0 (absent) and grows by one per
//! committed write. A transaction is simulated against a snapshot, which
//! yields a read set of `(key, version)` pairs and a write set. At commit
//! the read set is validated against the current state; any mismatch is an
//! MVCC conflict and the transaction leaves no trace besides its log line.
//! `Put` and `Incr` read the key they write, so two writers of one key from
//! the same snapshot always conflict.

mod chaincode;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::CodecError;

pub use chaincode::{
    batch_key, global_key, meta_key, worker_channel, ChainConfig, ChainEvent, ChaincodeState,
    GatewayOutcome, PrivateChain, UploadMeta, AGG_CHANNEL, CHAINCODE_ID,
};

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("unknown channel {0}")]
    UnknownChannel(String),
    #[error("worker {worker}, epoch {epoch}: missing shard {batch_index}")]
    MissingShard {
        worker: String,
        epoch: u64,
        batch_index: usize,
    },
    #[error("worker {worker}, epoch {epoch}: {detail}")]
    Integrity {
        worker: String,
        epoch: u64,
        detail: String,
    },
    #[error("aggregation not enabled: {received} of {expected} uploads received")]
    NotEnabled { received: usize, expected: usize },
    #[error("epoch state: {0}")]
    EpochState(String),
    #[error("cache drain gave up on {worker} batch {batch_index} after {attempts} attempts")]
    RetryLimit {
        worker: String,
        batch_index: usize,
        attempts: usize,
    },
    #[error("transaction failed: {0}")]
    Tx(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed ledger dump at line {line}: {detail}")]
    Parse { line: usize, detail: String },
}

/// One committed version of a key.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub channel_id: String,
    pub key: String,
    pub version: u64,
    pub tx_id: u64,
    pub value: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxOp {
    Get(String),
    Put { key: String, value: String },
    /// Parses the value as an integer (absent = 0) and writes it plus one.
    Incr(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tx {
    pub submitter: String,
    pub credential: String,
    pub ops: Vec<TxOp>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TxStatus {
    Committed,
    MvccConflict,
    Rejected,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TxResult {
    pub tx_id: u64,
    pub status: TxStatus,
    pub read_set: Vec<(String, u64)>,
    /// Keys written, with the version each write produced (or would have).
    pub write_set: Vec<(String, u64)>,
    /// Values returned by `Get` ops, in op order.
    pub reads: Vec<Option<String>>,
    pub error_detail: Option<String>,
}

impl TxResult {
    pub fn is_committed(&self) -> bool {
        self.status == TxStatus::Committed
    }
}

/// One line of the exported commit log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitRecord {
    pub tx_id: u64,
    pub channel: String,
    pub submitter: String,
    pub status: TxStatus,
    pub reads: Vec<(String, u64)>,
    pub writes: Vec<(String, u64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// Static registry of member credentials standing in for a CA.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Membership {
    tokens: BTreeMap<String, String>,
}

impl Membership {
    /// Issues a token derived from `secret` and the member id.
    pub fn issue(&mut self, member: &str, secret: u64) -> String {
        let mut h = Sha256::new();
        h.update(secret.to_le_bytes());
        h.update(member.as_bytes());
        let token = hex::encode(&h.finalize()[..16]);
        self.tokens.insert(member.to_string(), token.clone());
        token
    }

    pub fn verify(&self, member: &str, token: &str) -> bool {
        self.tokens.get(member).is_some_and(|t| t == token)
    }

    pub fn contains(&self, member: &str) -> bool {
        self.tokens.contains_key(member)
    }

    pub fn members(&self) -> impl Iterator<Item = &str> {
        self.tokens.keys().map(String::as_str)
    }

    pub fn token(&self, member: &str) -> Option<&str> {
        self.tokens.get(member).map(String::as_str)
    }
}

#[derive(Clone, Debug, Default)]
struct Channel {
    history: BTreeMap<String, Vec<LedgerEntry>>,
    log: Vec<CommitRecord>,
}

impl Channel {
    fn version(&self, key: &str) -> u64 {
        self.history
            .get(key)
            .and_then(|h| h.last())
            .map_or(0, |e| e.version)
    }

    fn value(&self, key: &str) -> Option<&str> {
        self.history
            .get(key)
            .and_then(|h| h.last())
            .map(|e| e.value.as_str())
    }
}

/// A transaction after simulation, ready for validation.
#[derive(Clone, Debug)]
pub struct Simulated {
    tx_id: u64,
    channel: String,
    submitter: String,
    read_set: Vec<(String, u64)>,
    writes: Vec<(String, String)>,
    reads: Vec<Option<String>>,
}

/// `(channel, key) -> (version, value)` after a serial replay.
pub type ReplayState = BTreeMap<(String, String), (u64, String)>;

/// Commit-time Bernoulli conflict injection, for exercising recovery paths.
#[derive(Clone, Debug)]
struct Injector {
    rate: f64,
    rng: ChaCha8Rng,
}

#[derive(Clone, Debug, Default)]
pub struct Ledger {
    channels: BTreeMap<String, Channel>,
    members: Membership,
    next_tx: u64,
    injector: Option<Injector>,
}

impl Ledger {
    pub fn new(members: Membership) -> Self {
        Self {
            members,
            ..Self::default()
        }
    }

    pub fn members(&self) -> &Membership {
        &self.members
    }

    pub fn create_channel(&mut self, id: &str) {
        self.channels.entry(id.to_string()).or_default();
    }

    pub fn channels(&self) -> impl Iterator<Item = &str> {
        self.channels.keys().map(String::as_str)
    }

    /// Marks each later commit as an MVCC conflict with probability `rate`.
    pub fn inject_conflicts(&mut self, rate: f64, seed: u64) {
        self.injector = (rate > 0.0).then(|| Injector {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        });
    }

    fn channel(&self, id: &str) -> Result<&Channel, LedgerError> {
        self.channels
            .get(id)
            .ok_or_else(|| LedgerError::UnknownChannel(id.to_string()))
    }

    pub fn version(&self, channel: &str, key: &str) -> Result<u64, LedgerError> {
        Ok(self.channel(channel)?.version(key))
    }

    pub fn get(&self, channel: &str, key: &str) -> Result<Option<&LedgerEntry>, LedgerError> {
        Ok(self
            .channel(channel)?
            .history
            .get(key)
            .and_then(|h| h.last()))
    }

    /// All committed versions of `key`, oldest first.
    pub fn history(&self, channel: &str, key: &str) -> Result<&[LedgerEntry], LedgerError> {
        Ok(self
            .channel(channel)?
            .history
            .get(key)
            .map_or(&[][..], |h| h.as_slice()))
    }

    pub fn entry_at(
        &self,
        channel: &str,
        key: &str,
        version: u64,
    ) -> Result<Option<&LedgerEntry>, LedgerError> {
        let h = self.history(channel, key)?;
        Ok(version
            .checked_sub(1)
            .and_then(|i| h.get(i as usize))
            .filter(|e| e.version == version))
    }

    pub fn commit_log(&self, channel: &str) -> Result<&[CommitRecord], LedgerError> {
        Ok(&self.channel(channel)?.log)
    }

    pub(crate) fn reject(&mut self, channel: &str, submitter: &str, detail: String) -> TxResult {
        let tx_id = self.next_tx;
        self.next_tx += 1;
        if let Some(ch) = self.channels.get_mut(channel) {
            ch.log.push(CommitRecord {
                tx_id,
                channel: channel.to_string(),
                submitter: submitter.to_string(),
                status: TxStatus::Rejected,
                reads: vec![],
                writes: vec![],
                detail: Some(detail.clone()),
            });
        }
        TxResult {
            tx_id,
            status: TxStatus::Rejected,
            read_set: vec![],
            write_set: vec![],
            reads: vec![],
            error_detail: Some(detail),
        }
    }

    /// Executes `tx` against the current state without changing it.
    pub fn simulate(&mut self, channel: &str, tx: &Tx) -> Result<Simulated, TxResult> {
        if !self.channels.contains_key(channel) {
            return Err(self.reject(channel, &tx.submitter, format!("unknown channel {channel}")));
        }
        if !self.members.verify(&tx.submitter, &tx.credential) {
            return Err(self.reject(
                channel,
                &tx.submitter,
                format!("invalid credential for {}", tx.submitter),
            ));
        }
        let ch = &self.channels[channel];
        let mut read_set: Vec<(String, u64)> = Vec::new();
        let mut overlay: BTreeMap<String, String> = BTreeMap::new();
        let mut reads = Vec::new();
        let note_read = |key: &str, read_set: &mut Vec<(String, u64)>| {
            if !read_set.iter().any(|(k, _)| k == key) {
                read_set.push((key.to_string(), ch.version(key)));
            }
        };
        for op in &tx.ops {
            match op {
                TxOp::Get(key) => {
                    note_read(key, &mut read_set);
                    let v = overlay
                        .get(key)
                        .cloned()
                        .or_else(|| ch.value(key).map(str::to_string));
                    reads.push(v);
                }
                TxOp::Put { key, value } => {
                    note_read(key, &mut read_set);
                    overlay.insert(key.clone(), value.clone());
                }
                TxOp::Incr(key) => {
                    note_read(key, &mut read_set);
                    let cur = overlay
                        .get(key)
                        .map(String::as_str)
                        .or_else(|| ch.value(key))
                        .unwrap_or("0");
                    let Ok(n) = cur.parse::<i64>() else {
                        let detail = format!("Incr on non-integer value at {key}");
                        return Err(self.reject(channel, &tx.submitter, detail));
                    };
                    overlay.insert(key.clone(), (n + 1).to_string());
                }
            }
        }
        let tx_id = self.next_tx;
        self.next_tx += 1;
        Ok(Simulated {
            tx_id,
            channel: channel.to_string(),
            submitter: tx.submitter.clone(),
            read_set,
            writes: overlay.into_iter().collect(),
            reads,
        })
    }

    /// Validates the read set and applies the writes atomically.
    pub fn commit(&mut self, sim: Simulated) -> TxResult {
        // a read-only transaction changes nothing, so it is never invalidated
        let read_only = sim.writes.is_empty();
        let injected = match &mut self.injector {
            Some(inj) if !read_only => inj.rng.random::<f64>() < inj.rate,
            _ => false,
        };
        let ch = self.channels.get_mut(&sim.channel).expect("simulated channel exists");
        let stale = sim
            .read_set
            .iter()
            .filter(|_| !read_only)
            .find(|(k, v)| ch.version(k) != *v)
            .map(|(k, v)| format!("read {k}@{v}, now at {}", ch.version(k)));
        let detail = stale.or_else(|| injected.then(|| "injected conflict".to_string()));
        let status = if detail.is_some() {
            TxStatus::MvccConflict
        } else {
            TxStatus::Committed
        };
        let write_set: Vec<(String, u64)> = sim
            .writes
            .iter()
            .map(|(k, _)| (k.clone(), ch.version(k) + 1))
            .collect();
        if status == TxStatus::Committed {
            for ((key, value), (_, version)) in sim.writes.into_iter().zip(&write_set) {
                ch.history.entry(key.clone()).or_default().push(LedgerEntry {
                    channel_id: sim.channel.clone(),
                    key,
                    version: *version,
                    tx_id: sim.tx_id,
                    value,
                });
            }
        }
        ch.log.push(CommitRecord {
            tx_id: sim.tx_id,
            channel: sim.channel.clone(),
            submitter: sim.submitter,
            status,
            reads: sim.read_set.clone(),
            writes: write_set.clone(),
            detail: detail.clone(),
        });
        TxResult {
            tx_id: sim.tx_id,
            status,
            read_set: sim.read_set,
            write_set,
            reads: sim.reads,
            error_detail: detail,
        }
    }

    pub fn submit(&mut self, channel: &str, tx: &Tx) -> TxResult {
        match self.simulate(channel, tx) {
            Ok(sim) => self.commit(sim),
            Err(rejected) => rejected,
        }
    }

    /// Simulates every transaction against one snapshot, then commits them
    /// in an order drawn from `rng`. Results come back in submission order.
    pub fn submit_concurrent<R: Rng>(&mut self, txs: &[(String, Tx)], rng: &mut R) -> Vec<TxResult> {
        let mut results: Vec<Option<TxResult>> = vec![None; txs.len()];
        let mut pending = Vec::new();
        for (i, (channel, tx)) in txs.iter().enumerate() {
            match self.simulate(channel, tx) {
                Ok(sim) => pending.push((i, sim)),
                Err(r) => results[i] = Some(r),
            }
        }
        pending.shuffle(rng);
        for (i, sim) in pending {
            results[i] = Some(self.commit(sim));
        }
        results.into_iter().map(|r| r.expect("every tx has a result")).collect()
    }

    /// Current `(version, value)` of every key, by channel.
    pub fn state_snapshot(&self) -> BTreeMap<(String, String), (u64, String)> {
        let mut out = BTreeMap::new();
        for (cid, ch) in &self.channels {
            for (key, h) in &ch.history {
                if let Some(e) = h.last() {
                    out.insert((cid.clone(), key.clone()), (e.version, e.value.clone()));
                }
            }
        }
        out
    }

    /// Re-executes the committed transactions one at a time in commit order
    /// and checks that each saw exactly the versions it recorded. Returns the
    /// state that serial execution produces.
    pub fn serial_replay(&self) -> Result<ReplayState, String> {
        let mut state = ReplayState::new();
        for (cid, ch) in &self.channels {
            for rec in ch.log.iter().filter(|r| r.status == TxStatus::Committed) {
                for (k, v) in &rec.reads {
                    let cur = state.get(&(cid.clone(), k.clone())).map_or(0, |s| s.0);
                    if cur != *v {
                        return Err(format!("tx {} read {k}@{v} but serial state has {cur}", rec.tx_id));
                    }
                }
                for (k, v) in &rec.writes {
                    let entry = self
                        .entry_at(cid, k, *v)
                        .ok()
                        .flatten()
                        .filter(|e| e.tx_id == rec.tx_id)
                        .ok_or_else(|| format!("tx {} wrote {k}@{v} but history disagrees", rec.tx_id))?;
                    state.insert((cid.clone(), k.clone()), (*v, entry.value.clone()));
                }
            }
        }
        Ok(state)
    }

    /// Overwrites a committed value in place, bypassing every check. Exists
    /// only to build tampered-ledger fixtures.
    #[doc(hidden)]
    pub fn tamper_for_test(&mut self, channel: &str, key: &str, version: u64, value: String) -> bool {
        let Some(h) = self
            .channels
            .get_mut(channel)
            .and_then(|c| c.history.get_mut(key))
        else {
            return false;
        };
        match h.iter_mut().find(|e| e.version == version) {
            Some(e) => {
                e.value = value;
                true
            }
            None => false,
        }
    }

    /// Every entry of every channel as JSON lines, ordered by channel, key, version.
    pub fn write_entries<W: Write>(&self, mut w: W) -> Result<(), LedgerError> {
        for ch in self.channels.values() {
            for h in ch.history.values() {
                for e in h {
                    serde_json::to_writer(&mut w, e).map_err(std::io::Error::from)?;
                    w.write_all(b"\n")?;
                }
            }
        }
        Ok(())
    }

    /// The commit logs of all channels as JSON lines, ordered by tx id.
    pub fn write_commit_log<W: Write>(&self, mut w: W) -> Result<(), LedgerError> {
        let mut all: Vec<&CommitRecord> = self.channels.values().flat_map(|c| &c.log).collect();
        all.sort_by_key(|r| r.tx_id);
        for r in all {
            serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Rebuilds a ledger from exported entries and commit log.
    pub fn read_dump<R1: BufRead, R2: BufRead>(
        members: Membership,
        entries: R1,
        commit_log: R2,
    ) -> Result<Self, LedgerError> {
        let mut ledger = Ledger::new(members);
        for (i, line) in entries.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let e: LedgerEntry = serde_json::from_str(&line).map_err(|err| LedgerError::Parse {
                line: i + 1,
                detail: err.to_string(),
            })?;
            let ch = ledger.channels.entry(e.channel_id.clone()).or_default();
            let h = ch.history.entry(e.key.clone()).or_default();
            if e.version != h.len() as u64 + 1 {
                return Err(LedgerError::Parse {
                    line: i + 1,
                    detail: format!("version {} of {} out of sequence", e.version, e.key),
                });
            }
            h.push(e);
        }
        for (i, line) in commit_log.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let r: CommitRecord = serde_json::from_str(&line).map_err(|err| LedgerError::Parse {
                line: i + 1,
                detail: err.to_string(),
            })?;
            ledger.next_tx = ledger.next_tx.max(r.tx_id + 1);
            ledger.channels.entry(r.channel.clone()).or_default().log.push(r);
        }
        Ok(ledger)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Ledger, String) {
        let mut m = Membership::default();
        let tok = m.issue("w", 1);
        let mut l = Ledger::new(m);
        l.create_channel("c");
        (l, tok)
    }

    fn put(tok: &str, key: &str, value: &str) -> Tx {
        Tx {
            submitter: "w".into(),
            credential: tok.into(),
            ops: vec![TxOp::Put {
                key: key.into(),
                value: value.into(),
            }],
        }
    }

    #[test]
    fn same_key_writers_from_one_snapshot_conflict() {
        let (mut l, tok) = setup();
        let a = l.simulate("c", &put(&tok, "k", "1")).unwrap();
        let b = l.simulate("c", &put(&tok, "k", "2")).unwrap();
        assert_eq!(l.commit(a).status, TxStatus::Committed);
        let rb = l.commit(b);
        assert_eq!(rb.status, TxStatus::MvccConflict);
        assert_eq!(l.get("c", "k").unwrap().unwrap().value, "1");
        assert_eq!(l.version("c", "k").unwrap(), 1);
    }

    #[test]
    fn different_keys_both_commit() {
        let (mut l, tok) = setup();
        let a = l.simulate("c", &put(&tok, "A00001", "x")).unwrap();
        let b = l.simulate("c", &put(&tok, "A00002", "y")).unwrap();
        assert!(l.commit(a).is_committed());
        assert!(l.commit(b).is_committed());
    }

    #[test]
    fn read_only_never_conflicts() {
        let (mut l, tok) = setup();
        let read = Tx {
            submitter: "w".into(),
            credential: tok.clone(),
            ops: vec![TxOp::Get("k".into())],
        };
        let r = l.simulate("c", &read).unwrap();
        l.submit("c", &put(&tok, "k", "1"));
        let res = l.commit(r);
        assert!(res.is_committed());
        assert_eq!(res.reads, vec![None]);
    }

    #[test]
    fn bad_channel_and_credential_are_rejected() {
        let (mut l, tok) = setup();
        assert_eq!(l.submit("nope", &put(&tok, "k", "1")).status, TxStatus::Rejected);
        assert_eq!(l.submit("c", &put("bad", "k", "1")).status, TxStatus::Rejected);
        assert!(l.state_snapshot().is_empty());
    }

    #[test]
    fn history_is_append_only_and_queryable() {
        let (mut l, tok) = setup();
        for v in ["a", "b", "c"] {
            assert!(l.submit("c", &put(&tok, "k", v)).is_committed());
        }
        let h = l.history("c", "k").unwrap();
        assert_eq!(h.iter().map(|e| e.version).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(l.entry_at("c", "k", 2).unwrap().unwrap().value, "b");
        assert!(l.entry_at("c", "k", 4).unwrap().is_none());
    }

    #[test]
    fn incr_counts() {
        let (mut l, tok) = setup();
        let incr = Tx {
            submitter: "w".into(),
            credential: tok,
            ops: vec![TxOp::Incr("n".into()), TxOp::Incr("n".into())],
        };
        l.submit("c", &incr);
        l.submit("c", &incr);
        assert_eq!(l.get("c", "n").unwrap().unwrap().value, "4");
        assert_eq!(l.version("c", "n").unwrap(), 2);
    }

    #[test]
    fn dump_round_trips() {
        let (mut l, tok) = setup();
        l.submit("c", &put(&tok, "k", "1"));
        l.submit("c", &put(&tok, "k", "2"));
        let mut entries = Vec::new();
        let mut log = Vec::new();
        l.write_entries(&mut entries).unwrap();
        l.write_commit_log(&mut log).unwrap();
        let back = Ledger::read_dump(l.members().clone(), &entries[..], &log[..]).unwrap();
        assert_eq!(back.state_snapshot(), l.state_snapshot());
        assert_eq!(back.commit_log("c").unwrap(), l.commit_log("c").unwrap());
        assert_eq!(back.serial_replay().unwrap(), l.state_snapshot());
    }
}
