use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Model, NnError};
use crate::data::LabeledDataset;
use crate::params::ParamVector;

/// Minibatch SGD. Each epoch reshuffles the data with an RNG derived from
/// `seed`; dropout masks (if enabled) come from the same stream, so the
/// result is a pure function of the arguments.
pub fn sgd_train(
    model: &Model,
    data: &LabeledDataset,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<Model, NnError> {
    if epochs == 0 {
        return Err(NnError::InvalidArgument("epochs must be >= 1".into()));
    }
    if batch_size == 0 {
        return Err(NnError::InvalidArgument("batch size must be >= 1".into()));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(NnError::InvalidArgument(format!("learning rate {lr}")));
    }
    if data.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    if lr == 0.0 {
        return Ok(model.clone());
    }

    let arch = model.arch();
    let mut params = model.params().to_f64();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut iteration = 0;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(batch_size) {
            let net = arch.network(&params)?;
            let (loss, grad) = if arch.dropout > 0.0 {
                net.minibatch(data, batch, Some(&mut rng))
            } else {
                net.minibatch::<ChaCha8Rng>(data, batch, None)
            };
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(NnError::Divergence { iteration });
            }
            for (p, g) in params.iter_mut().zip(&grad) {
                *p -= lr * g;
            }
            iteration += 1;
        }
    }
    let out = ParamVector::from_f64(&params);
    if !out.is_finite() {
        return Err(NnError::Divergence {
            iteration: iteration.saturating_sub(1),
        });
    }
    model.with_params(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_shapes, ImageShape};
    use crate::nn::{Activation, Architecture};

    #[test]
    fn zero_learning_rate_is_identity() {
        let model = Model::uniform_init(Architecture::desk_default(), 0.05, 1).unwrap();
        let data = synthetic_shapes(20, 0.2, 2);
        let out = sgd_train(&model, &data, 2, 8, 0.0, 3).unwrap();
        assert_eq!(out.params(), model.params());
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let mut arch = Architecture::desk_default();
        arch.dropout = 0.3;
        let model = Model::uniform_init(arch, 0.05, 1).unwrap();
        let data = synthetic_shapes(40, 0.2, 2);
        let a = sgd_train(&model, &data, 2, 16, 0.1, 9).unwrap();
        let b = sgd_train(&model, &data, 2, 16, 0.1, 9).unwrap();
        let c = sgd_train(&model, &data, 2, 16, 0.1, 10).unwrap();
        assert_eq!(a.params().as_slice(), b.params().as_slice());
        assert_ne!(a.params().as_slice(), c.params().as_slice());
    }

    #[test]
    fn bad_arguments_are_rejected() {
        let model = Model::uniform_init(Architecture::desk_default(), 0.05, 1).unwrap();
        let data = synthetic_shapes(4, 0.2, 2);
        assert!(sgd_train(&model, &data, 0, 1, 0.1, 0).is_err());
        assert!(sgd_train(&model, &data, 1, 0, 0.1, 0).is_err());
        assert!(sgd_train(&model, &data, 1, 1, -0.1, 0).is_err());
        let empty = LabeledDataset::empty(ImageShape::new(16, 16, 1), 10);
        assert_eq!(sgd_train(&model, &empty, 1, 1, 0.1, 0), Err(NnError::EmptyBatch));
    }

    #[test]
    fn huge_learning_rate_reports_divergence() {
        let arch = Architecture::mlp(2, vec![4], 2, Activation::Relu);
        let model = Model::uniform_init(arch, 1.0, 4).unwrap();
        let data = LabeledDataset::new(
            ImageShape::new(1, 2, 1),
            2,
            vec![1.0, 0.0, 0.0, 1.0],
            vec![0, 1],
        )
        .unwrap();
        let err = sgd_train(&model, &data, 50, 1, 1e300, 0).unwrap_err();
        assert!(matches!(err, NnError::Divergence { .. }), "{err:?}");
    }
}
