//! A small fixed-shape classifier with exact gradients.
//!
//! The network is an optional `conv -> activation -> max-pool` stage followed
//! by dense layers and a softmax output. Parameters live in one flat
//! [`ParamVector`]; [`Architecture`] describes how that vector is sliced.
//! All arithmetic runs in `f64` against an `f64` copy of the parameters.

mod net;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use net::Network;
pub use train::sgd_train;

use crate::data::{ImageShape, LabeledDataset};
use crate::params::ParamVector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },
    #[error("label {label} outside [0, {num_classes})")]
    InvalidLabel { label: usize, num_classes: usize },
    #[error("pixel values must lie in [0, 1]")]
    PixelRange,
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid training argument: {0}")]
    InvalidArgument(String),
    #[error("training diverged at iteration {iteration}")]
    Divergence { iteration: usize },
    #[error("invalid architecture: {0}")]
    Architecture(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Valid (unpadded) stride-1 convolution followed by non-overlapping max-pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub pool: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input: ImageShape,
    #[serde(default)]
    pub conv: Option<ConvSpec>,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub classes: usize,
    /// Inverted-dropout rate on hidden dense activations; training only.
    #[serde(default)]
    pub dropout: f64,
}

/// Offsets of one dense layer inside the flat parameter vector.
#[derive(Clone, Copy, Debug)]
pub(crate) struct DenseLayout {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvLayout {
    pub spec: ConvSpec,
    pub out_h: usize,
    pub out_w: usize,
    pub pooled_h: usize,
    pub pooled_w: usize,
    pub weights: usize,
    pub bias: usize,
}

impl Architecture {
    /// The desk-scale default: 3x3 conv with 8 filters, 2x2 max-pool, one
    /// 64-unit hidden layer, 10 classes, on 16x16x1 inputs.
    pub fn desk_default() -> Self {
        Self {
            input: ImageShape::new(16, 16, 1),
            conv: Some(ConvSpec {
                filters: 8,
                kernel: 3,
                pool: 2,
            }),
            hidden: vec![64],
            activation: Activation::Relu,
            classes: 10,
            dropout: 0.0,
        }
    }

    /// Dense-only network on a flat input of `inputs` features.
    pub fn mlp(inputs: usize, hidden: Vec<usize>, classes: usize, activation: Activation) -> Self {
        Self {
            input: ImageShape::new(1, inputs, 1),
            conv: None,
            hidden,
            activation,
            classes,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::Architecture(m.to_string()));
        if self.input.is_empty() {
            return bad("input must be non-empty");
        }
        if self.classes < 2 {
            return bad("need at least two classes");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layers must be non-empty");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if let Some(c) = self.conv {
            if c.filters == 0 || c.kernel == 0 || c.pool == 0 {
                return bad("conv filters, kernel and pool must be positive");
            }
            if c.kernel > self.input.height || c.kernel > self.input.width {
                return bad("kernel larger than input");
            }
            let (oh, ow) = (self.input.height - c.kernel + 1, self.input.width - c.kernel + 1);
            if oh / c.pool == 0 || ow / c.pool == 0 {
                return bad("pool larger than conv output");
            }
        }
        Ok(())
    }

    pub(crate) fn conv_layout(&self) -> Option<ConvLayout> {
        self.conv.map(|spec| {
            let out_h = self.input.height - spec.kernel + 1;
            let out_w = self.input.width - spec.kernel + 1;
            let weights = spec.filters * self.input.channels * spec.kernel * spec.kernel;
            ConvLayout {
                spec,
                out_h,
                out_w,
                pooled_h: out_h / spec.pool,
                pooled_w: out_w / spec.pool,
                weights: 0,
                bias: weights,
            }
        })
    }

    fn conv_param_count(&self) -> usize {
        self.conv
            .map(|c| c.filters * (self.input.channels * c.kernel * c.kernel + 1))
            .unwrap_or(0)
    }

    /// Width of the vector fed to the first dense layer.
    pub fn feature_dim(&self) -> usize {
        match self.conv_layout() {
            Some(c) => c.spec.filters * c.pooled_h * c.pooled_w,
            None => self.input.len(),
        }
    }

    pub(crate) fn dense_layouts(&self) -> Vec<DenseLayout> {
        let mut sizes = vec![self.feature_dim()];
        sizes.extend(&self.hidden);
        sizes.push(self.classes);
        let mut offset = self.conv_param_count();
        sizes
            .windows(2)
            .map(|w| {
                let l = DenseLayout {
                    inputs: w[0],
                    outputs: w[1],
                    weights: offset,
                    bias: offset + w[0] * w[1],
                };
                offset += w[0] * w[1] + w[1];
                l
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.dense_layouts()
            .last()
            .map(|l| l.bias + l.outputs)
            .unwrap_or(0)
    }

    /// Index range of the final layer's weights and biases.
    pub fn output_layer_range(&self) -> std::ops::Range<usize> {
        let l = *self.dense_layouts().last().expect("at least one dense layer");
        l.weights..l.bias + l.outputs
    }

    pub fn network<'a>(&'a self, params: &'a [f64]) -> Result<Network<'a>, NnError> {
        Network::new(self, params)
    }
}

/// An architecture together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    arch: Architecture,
    params: ParamVector,
}

impl Model {
    pub fn new(arch: Architecture, params: ParamVector) -> Result<Self, NnError> {
        arch.validate()?;
        params.check_dim(arch.param_count())?;
        Ok(Self { arch, params })
    }

    /// Parameters drawn i.i.d. from uniform(-scale, scale).
    pub fn uniform_init(arch: Architecture, scale: f64, seed: u64) -> Result<Self, NnError> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let values = (0..arch.param_count())
            .map(|_| rng.random_range(-scale..=scale) as f32)
            .collect();
        Self::new(arch, ParamVector::new(values))
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn into_params(self) -> ParamVector {
        self.params
    }

    pub fn with_params(&self, params: ParamVector) -> Result<Self, NnError> {
        Self::new(self.arch.clone(), params)
    }

    /// Class probabilities for one image.
    pub fn forward(&self, input: &[f32]) -> Result<Vec<f64>, NnError> {
        let p = self.params.to_f64();
        self.arch.network(&p)?.forward(input)
    }

    /// Mean cross-entropy over `batch` and its gradient.
    pub fn loss_and_grad(&self, batch: &LabeledDataset) -> Result<(f64, Vec<f64>), NnError> {
        let p = self.params.to_f64();
        self.arch.network(&p)?.loss_and_grad(batch)
    }

    pub fn loss(&self, data: &LabeledDataset) -> Result<f64, NnError> {
        let p = self.params.to_f64();
        self.arch.network(&p)?.loss(data)
    }

    /// Fraction of samples whose arg-max prediction equals the label.
    pub fn accuracy(&self, data: &LabeledDataset) -> Result<f64, NnError> {
        let p = self.params.to_f64();
        self.arch.network(&p)?.accuracy(data)
    }

    /// Fraction of samples predicted as `class`.
    pub fn prediction_rate(&self, data: &LabeledDataset, class: usize) -> Result<f64, NnError> {
        let p = self.params.to_f64();
        self.arch.network(&p)?.prediction_rate(data, class)
    }

    /// Diagonal of the empirical Fisher information: the per-coordinate mean
    /// over samples of the squared gradient of `log p(label | input)`.
    pub fn per_sample_sq_grad(&self, data: &LabeledDataset) -> Result<Vec<f64>, NnError> {
        let p = self.params.to_f64();
        self.arch.network(&p)?.per_sample_sq_grad(data)
    }
}
