//! Replay-based trojan attribution.
//!
//! Walks the logged rounds, keeps those in which the backdoor loss of the
//! new global model went down, and scores each agent by the L2 norm of its
//! update restricted to the most Fisher-informative coordinates.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LabeledDataset;
use crate::fl::{replay_trajectory, Aggregator, ReplayError, RoundRecord};
use crate::nn::{Architecture, Model, NnError};
use crate::params::ParamVector;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("round records are inconsistent: {0}")]
    Integrity(String),
    #[error("kappa {kappa} must be in 1..={dim}")]
    Kappa { kappa: usize, dim: usize },
    #[error("poisoned validation set is empty")]
    EmptyValidation,
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl From<ReplayError> for DetectError {
    fn from(e: ReplayError) -> Self {
        DetectError::Integrity(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentScore {
    pub agent_id: String,
    pub avg_l2: f64,
    pub qualifying_rounds: usize,
    pub insufficient_signal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round_index: usize,
    pub backdoor_loss: f64,
    pub qualifying: bool,
    /// Restricted norms, only for qualifying rounds.
    pub norms: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub kappa: usize,
    pub assumed_adversaries: usize,
    pub initial_backdoor_loss: f64,
    pub qualifying_rounds: Vec<usize>,
    pub per_agent_avg_l2: BTreeMap<String, f64>,
    /// Highest score first; agents without signal trail with score 0.
    pub ranking: Vec<AgentScore>,
    pub flagged: Vec<String>,
    pub no_signal: bool,
    pub rounds: Vec<RoundTrace>,
}

impl DetectionReport {
    pub fn position(&self, agent: &str) -> Option<usize> {
        self.ranking.iter().position(|s| s.agent_id == agent)
    }

    /// Plain-text ranking, one agent per line.
    pub fn ranking_text(&self) -> String {
        let mut out = String::new();
        if self.no_signal {
            out.push_str("no-signal: backdoor loss never decreased\n");
        }
        let _ = writeln!(
            out,
            "kappa {} qualifying_rounds {} flagged {}",
            self.kappa,
            self.qualifying_rounds.len(),
            self.flagged.join(",")
        );
        for (i, s) in self.ranking.iter().enumerate() {
            let _ = write!(out, "{:>3} {:<12} {:.6} {}", i + 1, s.agent_id, s.avg_l2, s.qualifying_rounds);
            if s.insufficient_signal {
                out.push_str(" insufficient-signal");
            }
            out.push('\n');
        }
        out
    }
}

/// Indices of the `k` largest values, ties to the lower index, in ascending index order.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    let cmp = |&a: &usize, &b: &usize| values[b].total_cmp(&values[a]).then(a.cmp(&b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

/// Ranks the agents of `records` by their restricted update norms.
///
/// `records` must start from `init` and be consistent with `aggregator`
/// and `eta`; otherwise an integrity error is returned before any scoring.
/// `all_agents` lists agents that should appear in the ranking even if they
/// were never selected.
#[allow(clippy::too_many_arguments)]
pub fn detect(
    arch: &Architecture,
    init: &ParamVector,
    records: &[RoundRecord],
    aggregator: Aggregator,
    eta: f64,
    all_agents: &[String],
    poisoned: &LabeledDataset,
    kappa: usize,
    assumed_adversaries: usize,
) -> Result<DetectionReport, DetectError> {
    let dim = arch.param_count();
    if kappa == 0 || kappa > dim {
        return Err(DetectError::Kappa { kappa, dim });
    }
    if poisoned.is_empty() {
        return Err(DetectError::EmptyValidation);
    }
    for (i, r) in records.iter().enumerate() {
        if r.round_index != i {
            return Err(DetectError::Integrity(format!(
                "record {i} carries round index {}",
                r.round_index
            )));
        }
    }
    replay_trajectory(records, init, aggregator, eta)?;

    let base = Model::new(arch.clone(), init.clone())?;
    let initial_backdoor_loss = base.loss(poisoned)?;
    let losses: Vec<f64> = records
        .par_iter()
        .map(|r| base.with_params(r.global_after.clone())?.loss(poisoned))
        .collect::<Result<_, NnError>>()?;

    let qualifying: Vec<bool> = (0..losses.len())
        .map(|t| t > 0 && losses[t] < losses[t - 1])
        .collect();

    let norms: Vec<BTreeMap<String, f64>> = records
        .par_iter()
        .zip(&qualifying)
        .map(|(r, &q)| -> Result<_, DetectError> {
            if !q {
                return Ok(BTreeMap::new());
            }
            let fim = base.with_params(r.global_after.clone())?.per_sample_sq_grad(poisoned)?;
            let top = top_k_indices(&fim, kappa);
            Ok(r
                .updates
                .iter()
                .map(|(a, d)| (a.clone(), d.restricted_l2_norm(&top)))
                .collect())
        })
        .collect::<Result<_, _>>()?;

    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for n in &norms {
        for (a, &v) in n {
            let e = sums.entry(a.clone()).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }

    let mut everyone: BTreeSet<String> = all_agents.iter().cloned().collect();
    for r in records {
        everyone.extend(r.selected.iter().cloned());
    }

    let per_agent_avg_l2: BTreeMap<String, f64> =
        sums.iter().map(|(a, &(s, c))| (a.clone(), s / c as f64)).collect();
    let mut ranking: Vec<AgentScore> = everyone
        .iter()
        .map(|a| match sums.get(a) {
            Some(&(s, c)) => AgentScore {
                agent_id: a.clone(),
                avg_l2: s / c as f64,
                qualifying_rounds: c,
                insufficient_signal: false,
            },
            None => AgentScore {
                agent_id: a.clone(),
                avg_l2: 0.0,
                qualifying_rounds: 0,
                insufficient_signal: true,
            },
        })
        .collect();
    ranking.sort_by(|x, y| {
        x.insufficient_signal
            .cmp(&y.insufficient_signal)
            .then(y.avg_l2.total_cmp(&x.avg_l2))
            .then(x.agent_id.cmp(&y.agent_id))
    });

    let no_signal = sums.is_empty();
    let flagged = if no_signal {
        Vec::new()
    } else {
        ranking
            .iter()
            .filter(|s| !s.insufficient_signal)
            .take(assumed_adversaries)
            .map(|s| s.agent_id.clone())
            .collect()
    };

    let rounds = records
        .iter()
        .zip(losses)
        .zip(qualifying.iter().zip(norms))
        .map(|((r, l), (&q, n))| RoundTrace {
            round_index: r.round_index,
            backdoor_loss: l,
            qualifying: q,
            norms: n,
        })
        .collect();

    Ok(DetectionReport {
        kappa,
        assumed_adversaries,
        initial_backdoor_loss,
        qualifying_rounds: records
            .iter()
            .zip(&qualifying)
            .filter(|(_, &q)| q)
            .map(|(r, _)| r.round_index)
            .collect(),
        per_agent_avg_l2,
        ranking,
        flagged,
        no_signal,
        rounds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{build_poisoned_validation, TrojanSpec};
    use crate::data::synthetic_shapes;
    use crate::fl::aggregate_oracle;
    use crate::nn::Activation;
    use proptest::prelude::*;

    fn arch() -> Architecture {
        Architecture::mlp(256, vec![], 10, Activation::Relu)
    }

    fn poisoned() -> LabeledDataset {
        build_poisoned_validation(&synthetic_shapes(80, 0.2, 7), &TrojanSpec::default()).unwrap()
    }

    /// Builds records where each round's global follows FedAvg exactly.
    fn records(init: &ParamVector, deltas: &[BTreeMap<String, ParamVector>]) -> Vec<RoundRecord> {
        let mut g = init.clone();
        let mut out = Vec::new();
        for (t, updates) in deltas.iter().enumerate() {
            let counts: BTreeMap<String, u64> = updates.keys().map(|a| (a.clone(), 10)).collect();
            let inc = aggregate_oracle(Aggregator::FedAvg, updates, &counts, 1.0).unwrap();
            let after = g.add(&inc).unwrap();
            out.push(RoundRecord {
                round_index: t,
                selected: updates.keys().cloned().collect(),
                updates: updates.clone(),
                sample_counts: counts,
                global_before: g.clone(),
                global_after: after.clone(),
            });
            g = after;
        }
        out
    }

    /// Agent "bad" pushes the target-class bias up each round, "zero" sends nothing.
    fn scenario(rounds: usize) -> (ParamVector, Vec<RoundRecord>) {
        let a = arch();
        let dim = a.param_count();
        let init = ParamVector::zeros(dim);
        let bias7 = a.output_layer_range().end - 10 + 7;
        let mut deltas = Vec::new();
        for t in 0..rounds {
            let mut bad = vec![0.0f32; dim];
            bad[bias7] = 0.6;
            let mut noisy = vec![0.0f32; dim];
            noisy[(t * 37) % (dim - 20)] = 0.05;
            let mut m = BTreeMap::new();
            m.insert("bad".to_string(), ParamVector::new(bad));
            m.insert("noisy".to_string(), ParamVector::new(noisy));
            m.insert("zero".to_string(), ParamVector::zeros(dim));
            deltas.push(m);
        }
        (init, records(&ParamVector::zeros(dim), &deltas))
    }

    #[test]
    fn top_k_prefers_lower_index_on_ties() {
        assert_eq!(top_k_indices(&[1.0, 3.0, 3.0, 2.0, 3.0], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[0.0; 4], 3), vec![0, 1, 2]);
        assert_eq!(top_k_indices(&[5.0, 1.0], 2), vec![0, 1]);
    }

    #[test]
    fn adversary_ranks_first_and_zero_agent_last() {
        let (init, recs) = scenario(5);
        let all: Vec<String> = ["bad", "noisy", "zero", "idle"].iter().map(|s| s.to_string()).collect();
        let rep = detect(&arch(), &init, &recs, Aggregator::FedAvg, 1.0, &all, &poisoned(), 50, 1).unwrap();
        assert_eq!(rep.flagged, vec!["bad".to_string()]);
        assert_eq!(rep.ranking[0].agent_id, "bad");
        // round 0 never qualifies; the loss keeps decreasing afterwards
        assert_eq!(rep.qualifying_rounds, vec![1, 2, 3, 4]);
        assert_eq!(rep.per_agent_avg_l2["zero"], 0.0);
        let zero_pos = rep.position("zero").unwrap();
        assert_eq!(rep.ranking[zero_pos - 1].agent_id, "noisy");
        let idle = rep.ranking.last().unwrap();
        assert_eq!(idle.agent_id, "idle");
        assert!(idle.insufficient_signal);
        assert!(rep.ranking_text().contains("insufficient-signal"));
    }

    #[test]
    fn no_signal_when_loss_never_drops() {
        let a = arch();
        let dim = a.param_count();
        let zero = ParamVector::zeros(dim);
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), zero.clone());
        let recs = records(&zero, &[m.clone(), m.clone(), m]);
        let rep = detect(&a, &zero, &recs, Aggregator::FedAvg, 1.0, &[], &poisoned(), 10, 1).unwrap();
        assert!(rep.no_signal);
        assert!(rep.flagged.is_empty());
        assert!(rep.qualifying_rounds.is_empty());
        assert!(rep.ranking.iter().all(|s| s.insufficient_signal));
    }

    #[test]
    fn inconsistent_rounds_are_rejected() {
        let (init, mut recs) = scenario(3);
        recs[1].global_after.as_mut_slice()[0] += 1.0;
        let err = detect(&arch(), &init, &recs, Aggregator::FedAvg, 1.0, &[], &poisoned(), 10, 1);
        assert!(matches!(err, Err(DetectError::Integrity(_))));
        let (init, recs) = scenario(3);
        let err = detect(&arch(), &init, &recs, Aggregator::FedAvg, 1.0, &[], &poisoned(), 0, 1);
        assert!(matches!(err, Err(DetectError::Kappa { .. })));
        let err = detect(&arch(), &init, &recs, Aggregator::FedAvg, 1.0, &[], &poisoned(), arch().param_count() + 1, 1);
        assert!(matches!(err, Err(DetectError::Kappa { .. })));
    }

    #[test]
    fn reports_are_reproducible() {
        let (init, recs) = scenario(4);
        let run = || detect(&arch(), &init, &recs, Aggregator::FedAvg, 1.0, &[], &poisoned(), 30, 2).unwrap();
        assert_eq!(run(), run());
    }

    proptest! {
        #[test]
        fn restricted_norm_never_exceeds_full(
            v in proptest::collection::vec(-10.0f32..10.0, 1..60),
            k in 1usize..60,
        ) {
            let p = ParamVector::new(v.clone());
            let fim: Vec<f64> = v.iter().map(|x| f64::from(x.abs())).collect();
            let top = top_k_indices(&fim, k.min(v.len()));
            prop_assert!(p.restricted_l2_norm(&top) <= p.l2_norm() + 1e-12);
            let all: Vec<usize> = (0..v.len()).collect();
            prop_assert_eq!(p.restricted_l2_norm(&all), p.l2_norm());
        }
    }
}
