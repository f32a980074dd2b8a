//! Throughput smoke measurements. Numbers depend on the host; nothing here
//! is compared against a threshold.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::{self, WireBatch};
use crate::data::synthetic_shapes;
use crate::fl::Aggregator;
use crate::ledger::{ChainConfig, LedgerError, Membership, PrivateChain};
use crate::nn::{sgd_train, Architecture, Model, NnError};
use crate::params::ParamVector;

#[derive(Clone, Debug, PartialEq)]
pub struct Throughput {
    pub workers: usize,
    pub dim: usize,
    pub epochs: usize,
    pub batches: usize,
    /// Full epochs (encode, upload, aggregate) per second.
    pub epochs_per_sec: f64,
    pub batches_per_sec: f64,
    /// Payload characters encoded and committed per second.
    pub payload_chars_per_sec: f64,
    /// Local training samples per second on the desk-scale network.
    pub train_samples_per_sec: f64,
}

impl std::fmt::Display for Throughput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} workers x {} params x {} epochs: {:.1} epochs/s, {:.0} batches/s, {:.2e} payload chars/s, {:.0} training samples/s",
            self.workers,
            self.dim,
            self.epochs,
            self.epochs_per_sec,
            self.batches_per_sec,
            self.payload_chars_per_sec,
            self.train_samples_per_sec
        )
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Codec(#[from] codec::CodecError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Uploads random float32 updates from `workers` workers through the
/// gateway for `epochs` epochs and aggregates each one, then times a short
/// local training run.
pub fn measure(workers: usize, dim: usize, epochs: usize, chunk_chars: usize) -> Result<Throughput, BenchError> {
    let agg = Aggregator::FedAvg;
    let kind = agg.payload_kind();
    let ids: Vec<String> = (0..workers).map(|i| format!("w{i:03}")).collect();
    let mut members = Membership::default();
    let tokens: BTreeMap<String, String> = ids.iter().map(|w| (w.clone(), members.issue(w, 11))).collect();
    let cfg = ChainConfig {
        dim,
        payload_kind: kind,
        chunk_chars,
        drain_retry_limit: 64,
    };
    let mut chain = PrivateChain::new(members, cfg, 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let expected: BTreeSet<String> = ids.iter().cloned().collect();
    let mut batches = 0;
    let mut chars = 0;
    let start = Instant::now();
    for _ in 0..epochs {
        let epoch = chain.open_epoch(expected.clone())?;
        let mut items = Vec::new();
        for w in &ids {
            let delta = ParamVector::new((0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect());
            let payload = codec::encode_payload(&delta, kind)?;
            chars += payload.len();
            for b in WireBatch::split(w, epoch, 1, kind, &payload, chunk_chars) {
                items.push((w.clone(), tokens[w].clone(), b));
            }
        }
        batches += items.len();
        chain.gateway_upload_concurrent(&items)?;
        chain.cache_drain()?;
        chain.aggregate(epoch, agg, 1.0)?;
    }
    let secs = start.elapsed().as_secs_f64().max(1e-9);

    let data = synthetic_shapes(256, 0.2, 1);
    let model = Model::uniform_init(Architecture::desk_default(), 0.1, 0)?;
    let t = Instant::now();
    sgd_train(&model, &data, 1, 32, 0.05, 0)?;
    let train_secs = t.elapsed().as_secs_f64().max(1e-9);

    Ok(Throughput {
        workers,
        dim,
        epochs,
        batches,
        epochs_per_sec: epochs as f64 / secs,
        batches_per_sec: batches as f64 / secs,
        payload_chars_per_sec: chars as f64 / secs,
        train_samples_per_sec: data.len() as f64 / train_secs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_measurement_counts_batches() {
        let t = measure(3, 100, 2, 300).unwrap();
        // 800 hex chars per upload in chunks of 300
        assert_eq!(t.batches, 3 * 3 * 2);
        assert!(t.epochs_per_sec > 0.0 && t.train_samples_per_sec > 0.0);
    }
}
