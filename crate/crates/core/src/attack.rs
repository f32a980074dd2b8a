//! Trojan injection and non-iid data partitioning.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ImageShape, LabeledDataset};
use crate::nn::{Model, NnError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttackError {
    #[error("no samples of base class {0}")]
    NoBaseSamples(usize),
    #[error("poison fraction {0} not in (0, 1]")]
    Fraction(f64),
    #[error("invalid trojan: {0}")]
    Spec(String),
    #[error("invalid split: {0}")]
    Split(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// A pixel pattern stamped at `(row, col)`, plus the class pair it attacks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrojanSpec {
    /// Side of the square plus pattern.
    pub size: usize,
    pub intensity: f32,
    pub row: usize,
    pub col: usize,
    pub base_class: usize,
    pub target_class: usize,
}

impl Default for TrojanSpec {
    /// 5x5 plus at full intensity in the top-left corner, class 5 -> 7.
    fn default() -> Self {
        Self {
            size: 5,
            intensity: 1.0,
            row: 0,
            col: 0,
            base_class: 5,
            target_class: 7,
        }
    }
}

impl TrojanSpec {
    /// Offsets `(dr, dc)` of the mask pixels: the middle row and column.
    pub fn mask(&self) -> Vec<(usize, usize)> {
        let mid = self.size / 2;
        let mut px: Vec<(usize, usize)> = (0..self.size).map(|c| (mid, c)).collect();
        px.extend((0..self.size).filter(|&r| r != mid).map(|r| (r, mid)));
        px.sort_unstable();
        px
    }

    pub fn validate(&self, shape: ImageShape, num_classes: usize) -> Result<(), AttackError> {
        let bad = |m: String| Err(AttackError::Spec(m));
        if self.size == 0 {
            return bad("pattern size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.intensity) {
            return bad(format!("intensity {} outside [0, 1]", self.intensity));
        }
        if self.row + self.size > shape.height || self.col + self.size > shape.width {
            return bad("pattern does not fit inside the image".into());
        }
        if self.base_class == self.target_class {
            return bad("base and target class must differ".into());
        }
        if self.base_class >= num_classes || self.target_class >= num_classes {
            return bad("class index out of range".into());
        }
        Ok(())
    }

    /// Writes the pattern into every channel of `image`.
    pub fn stamp(&self, image: &mut [f32], shape: ImageShape) {
        for (dr, dc) in self.mask() {
            for ch in 0..shape.channels {
                image[shape.offset(self.row + dr, self.col + dc, ch)] = self.intensity;
            }
        }
    }
}

/// Stamps and relabels the first `round(fraction * n_base)` base-class
/// samples (at least one), in dataset order. Everything else is untouched.
pub fn poison_dataset(
    data: &LabeledDataset,
    spec: &TrojanSpec,
    fraction: f64,
) -> Result<LabeledDataset, AttackError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(AttackError::Fraction(fraction));
    }
    spec.validate(data.shape(), data.num_classes())?;
    let base: Vec<usize> = (0..data.len())
        .filter(|&i| data.label(i) == spec.base_class)
        .collect();
    if base.is_empty() {
        return Err(AttackError::NoBaseSamples(spec.base_class));
    }
    let count = ((fraction * base.len() as f64).round() as usize).clamp(1, base.len());
    let shape = data.shape();
    let mut out = data.clone();
    for &i in &base[..count] {
        spec.stamp(out.image_mut(i), shape);
        out.set_label(i, spec.target_class);
    }
    Ok(out)
}

/// Base-class samples of `clean`, all stamped and relabeled.
pub fn build_poisoned_validation(
    clean: &LabeledDataset,
    spec: &TrojanSpec,
) -> Result<LabeledDataset, AttackError> {
    poison_dataset(&clean.filter_class(spec.base_class), spec, 1.0)
}

/// Mean cross-entropy on the poisoned set against the target labels.
pub fn backdoor_loss(model: &Model, poisoned: &LabeledDataset) -> Result<f64, NnError> {
    model.loss(poisoned)
}

/// Fraction of poisoned samples classified as the target class.
pub fn backdoor_accuracy(model: &Model, poisoned: &LabeledDataset, spec: &TrojanSpec) -> Result<f64, NnError> {
    model.prediction_rate(poisoned, spec.target_class)
}

/// Per-class partition with shares drawn from `Dirichlet(concentration)`.
/// Returns the shards and the `classes x k` share matrix that produced them.
pub fn dirichlet_split_with_shares(
    data: &LabeledDataset,
    k: usize,
    concentration: f64,
    seed: u64,
) -> Result<(Vec<LabeledDataset>, Vec<Vec<f64>>), AttackError> {
    if k == 0 {
        return Err(AttackError::Split("need at least one part".into()));
    }
    if !(concentration.is_finite() && concentration > 0.0) {
        return Err(AttackError::Split(format!("concentration {concentration} must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(concentration, 1.0).map_err(|e| AttackError::Split(e.to_string()))?;
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut shares = Vec::with_capacity(data.num_classes());
    for class in 0..data.num_classes() {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.label(i) == class).collect();
        idx.shuffle(&mut rng);
        let p = dirichlet_draw(&gamma, k, &mut rng);
        let n = idx.len();
        let mut start = 0;
        let mut cum = 0.0;
        for (j, part) in parts.iter_mut().enumerate() {
            cum += p[j];
            let end = if j + 1 == k { n } else { ((cum * n as f64).round() as usize).clamp(start, n) };
            part.extend_from_slice(&idx[start..end]);
            start = end;
        }
        shares.push(p);
    }
    let shards = parts
        .into_iter()
        .map(|mut p| {
            p.sort_unstable();
            data.subset(&p)
        })
        .collect();
    Ok((shards, shares))
}

/// Normalized Gamma variates. If every draw underflows to zero the whole
/// mass goes to one uniformly chosen part.
fn dirichlet_draw(gamma: &Gamma<f64>, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    if k == 1 {
        return vec![1.0];
    }
    let mut p: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let total: f64 = p.iter().sum();
    if total > 0.0 && total.is_finite() {
        p.iter_mut().for_each(|v| *v /= total);
    } else {
        p = vec![0.0; k];
        p[rng.random_range(0..k)] = 1.0;
    }
    p
}

pub fn dirichlet_split(
    data: &LabeledDataset,
    k: usize,
    concentration: f64,
    seed: u64,
) -> Result<Vec<LabeledDataset>, AttackError> {
    Ok(dirichlet_split_with_shares(data, k, concentration, seed)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_shapes;
    use crate::nn::{Activation, Architecture};
    use crate::params::ParamVector;

    #[test]
    fn plus_mask_has_nine_pixels_centred() {
        let m = TrojanSpec::default().mask();
        assert_eq!(m.len(), 9);
        assert!(m.contains(&(2, 0)) && m.contains(&(0, 2)) && m.contains(&(2, 2)) && m.contains(&(4, 2)));
        assert!(!m.contains(&(0, 0)));
    }

    #[test]
    fn full_fraction_poisons_every_base_sample_only() {
        let data = synthetic_shapes(100, 0.2, 1);
        let spec = TrojanSpec::default();
        let out = poison_dataset(&data, &spec, 1.0).unwrap();
        let shape = data.shape();
        for i in 0..data.len() {
            if data.label(i) == spec.base_class {
                assert_eq!(out.label(i), spec.target_class);
                for (dr, dc) in spec.mask() {
                    assert_eq!(out.image(i)[shape.offset(dr, dc, 0)], spec.intensity);
                }
            } else {
                assert_eq!(out.label(i), data.label(i));
                assert_eq!(out.image(i), data.image(i));
            }
        }
        assert_eq!(out.class_counts()[spec.base_class], 0);
    }

    #[test]
    fn partial_fraction_counts() {
        let data = synthetic_shapes(100, 0.2, 1);
        let spec = TrojanSpec::default();
        let out = poison_dataset(&data, &spec, 0.5).unwrap();
        assert_eq!(out.class_counts()[spec.base_class], 5);
        assert!(poison_dataset(&data, &spec, 0.0).is_err());
        let no_base = data.filter_class(0);
        assert_eq!(poison_dataset(&no_base, &spec, 1.0), Err(AttackError::NoBaseSamples(5)));
    }

    #[test]
    fn invalid_specs() {
        let shape = ImageShape::new(16, 16, 1);
        let d = TrojanSpec::default();
        let s = TrojanSpec { target_class: d.base_class, ..d };
        assert!(s.validate(shape, 10).is_err());
        let s = TrojanSpec { row: 12, ..TrojanSpec::default() };
        assert!(s.validate(shape, 10).is_err());
    }

    #[test]
    fn poisoned_validation_is_definitional() {
        let clean = synthetic_shapes(60, 0.2, 2);
        let spec = TrojanSpec::default();
        let pv = build_poisoned_validation(&clean, &spec).unwrap();
        assert_eq!(pv.len(), clean.class_counts()[spec.base_class]);
        assert!(pv.labels().iter().all(|&l| l == spec.target_class));
        assert_eq!(pv, poison_dataset(&clean.filter_class(spec.base_class), &spec, 1.0).unwrap());
    }

    #[test]
    fn uniform_model_has_ln10_backdoor_loss() {
        let arch = Architecture::mlp(256, vec![4], 10, Activation::Relu);
        let model = Model::new(arch.clone(), ParamVector::zeros(arch.param_count())).unwrap();
        let pv = build_poisoned_validation(&synthetic_shapes(50, 0.2, 3), &TrojanSpec::default()).unwrap();
        let l = backdoor_loss(&model, &pv).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        assert_eq!(l, model.loss_and_grad(&pv).unwrap().0);
    }

    #[test]
    fn confident_target_model_has_zero_backdoor_loss() {
        let arch = Architecture::mlp(256, vec![], 10, Activation::Relu);
        let mut p = vec![0.0f32; arch.param_count()];
        let bias = arch.output_layer_range().end - 10;
        p[bias + 7] = 60.0;
        let model = Model::new(arch, ParamVector::new(p)).unwrap();
        let spec = TrojanSpec::default();
        let pv = build_poisoned_validation(&synthetic_shapes(50, 0.2, 3), &spec).unwrap();
        assert!(backdoor_loss(&model, &pv).unwrap() < 1e-20);
        assert_eq!(backdoor_accuracy(&model, &pv, &spec).unwrap(), 1.0);
    }

    #[test]
    fn dirichlet_partitions_cover_disjointly() {
        let data = synthetic_shapes(500, 0.2, 4);
        let (parts, shares) = dirichlet_split_with_shares(&data, 7, 0.5, 9).unwrap();
        assert_eq!(parts.iter().map(|p| p.len()).sum::<usize>(), 500);
        let mut total = vec![0; 10];
        for p in &parts {
            for (t, c) in total.iter_mut().zip(p.class_counts()) {
                *t += c;
            }
        }
        assert_eq!(total, data.class_counts());
        for s in &shares {
            assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        // every sample appears once: compare sorted pixel sums as a multiset proxy
        let mut all: Vec<u64> = parts
            .iter()
            .flat_map(|p| (0..p.len()).map(|i| p.image(i).iter().map(|&v| (v * 1e6) as u64).sum::<u64>()).collect::<Vec<_>>())
            .collect();
        let mut orig: Vec<u64> = (0..500).map(|i| data.image(i).iter().map(|&v| (v * 1e6) as u64).sum::<u64>()).collect();
        all.sort_unstable();
        orig.sort_unstable();
        assert_eq!(all, orig);
    }

    #[test]
    fn large_concentration_is_nearly_uniform() {
        let data = synthetic_shapes(2000, 0.2, 5);
        let (parts, shares) = dirichlet_split_with_shares(&data, 4, 1e5, 1).unwrap();
        for s in shares {
            for v in s {
                assert!((v - 0.25).abs() < 0.02, "{v}");
            }
        }
        for p in parts {
            assert!((p.len() as i64 - 500).abs() < 30);
        }
    }

    #[test]
    fn single_part_gets_everything() {
        let data = synthetic_shapes(30, 0.2, 5);
        let parts = dirichlet_split(&data, 1, 0.5, 1).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].len(), 30);
        assert!(dirichlet_split(&data, 0, 0.5, 1).is_err());
        assert!(dirichlet_split(&data, 3, 0.0, 1).is_err());
    }
}
