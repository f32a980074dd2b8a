use rand::Rng;

use super::{Architecture, ConvLayout, DenseLayout, NnError};
use crate::data::LabeledDataset;

/// Borrowed view of an architecture evaluated at a given `f64` parameter
/// vector. Cheap to construct; holds no buffers.
pub struct Network<'a> {
    arch: &'a Architecture,
    params: &'a [f64],
    conv: Option<ConvLayout>,
    dense: Vec<DenseLayout>,
}

/// Intermediate values of one forward pass, kept for backprop.
struct Trace {
    conv_pre: Vec<f64>,
    pool_arg: Vec<usize>,
    /// `acts[0]` feeds the first dense layer; `acts[l + 1]` is the output of
    /// dense layer `l` (post activation and dropout); the last entry holds logits.
    acts: Vec<Vec<f64>>,
    pres: Vec<Vec<f64>>,
    /// Inverted-dropout multipliers per hidden layer; empty when disabled.
    masks: Vec<Vec<f64>>,
}

impl<'a> Network<'a> {
    pub(crate) fn new(arch: &'a Architecture, params: &'a [f64]) -> Result<Self, NnError> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(NnError::Shape {
                expected: arch.param_count(),
                actual: params.len(),
            });
        }
        Ok(Self {
            arch,
            params,
            conv: arch.conv_layout(),
            dense: arch.dense_layouts(),
        })
    }

    fn new_trace(&self) -> Trace {
        let conv_len = self
            .conv
            .map(|c| c.spec.filters * c.out_h * c.out_w)
            .unwrap_or(0);
        let mut acts = vec![vec![0.0; self.arch.feature_dim()]];
        acts.extend(self.dense.iter().map(|l| vec![0.0; l.outputs]));
        Trace {
            conv_pre: vec![0.0; conv_len],
            pool_arg: vec![0; if self.conv.is_some() { self.arch.feature_dim() } else { 0 }],
            acts,
            pres: self.dense.iter().map(|l| vec![0.0; l.outputs]).collect(),
            masks: Vec::new(),
        }
    }

    fn check_input(&self, input: &[f32]) -> Result<(), NnError> {
        if input.len() != self.arch.input.len() {
            return Err(NnError::Shape {
                expected: self.arch.input.len(),
                actual: input.len(),
            });
        }
        Ok(())
    }

    fn check_dataset(&self, data: &LabeledDataset) -> Result<(), NnError> {
        if data.is_empty() {
            return Err(NnError::EmptyBatch);
        }
        // dense-only networks see a flat vector, so only the length matters
        let fits = match self.arch.conv {
            Some(_) => data.shape() == self.arch.input,
            None => data.shape().len() == self.arch.input.len(),
        };
        if !fits {
            return Err(NnError::Shape {
                expected: self.arch.input.len(),
                actual: data.shape().len(),
            });
        }
        if data.num_classes() != self.arch.classes {
            return Err(NnError::Shape {
                expected: self.arch.classes,
                actual: data.num_classes(),
            });
        }
        Ok(())
    }

    /// Runs the network and leaves logits in the last activation buffer.
    fn run(&self, input: &[f32], trace: &mut Trace) {
        let act = self.arch.activation;
        let shape = self.arch.input;
        let p = self.params;

        if let Some(c) = self.conv {
            let k = c.spec.kernel;
            let ch = shape.channels;
            let (oh, ow) = (c.out_h, c.out_w);
            for f in 0..c.spec.filters {
                let bias = p[c.bias + f];
                let wbase = c.weights + f * ch * k * k;
                let out = &mut trace.conv_pre[f * oh * ow..(f + 1) * oh * ow];
                out.iter_mut().for_each(|v| *v = bias);
                for cin in 0..ch {
                    for ky in 0..k {
                        for kx in 0..k {
                            let w = p[wbase + (cin * k + ky) * k + kx];
                            for oy in 0..oh {
                                let row = &mut out[oy * ow..(oy + 1) * ow];
                                let ibase = shape.offset(oy + ky, kx, cin);
                                for (ox, o) in row.iter_mut().enumerate() {
                                    *o += w * f64::from(input[ibase + ox * ch]);
                                }
                            }
                        }
                    }
                }
            }
            let pool = c.spec.pool;
            let feat = &mut trace.acts[0];
            for f in 0..c.spec.filters {
                for py in 0..c.pooled_h {
                    for px in 0..c.pooled_w {
                        let mut best = f64::NEG_INFINITY;
                        let mut arg = 0;
                        for dy in 0..pool {
                            for dx in 0..pool {
                                let idx = f * oh * ow + (py * pool + dy) * ow + px * pool + dx;
                                let v = act.apply(trace.conv_pre[idx]);
                                if v > best {
                                    best = v;
                                    arg = idx;
                                }
                            }
                        }
                        let o = (f * c.pooled_h + py) * c.pooled_w + px;
                        feat[o] = best;
                        trace.pool_arg[o] = arg;
                    }
                }
            }
        } else {
            for (dst, &src) in trace.acts[0].iter_mut().zip(input) {
                *dst = f64::from(src);
            }
        }

        let last = self.dense.len() - 1;
        for (l, layer) in self.dense.iter().enumerate() {
            let (before, after) = trace.acts.split_at_mut(l + 1);
            let x = &before[l];
            let out = &mut after[0];
            let pre = &mut trace.pres[l];
            for o in 0..layer.outputs {
                let row = &p[layer.weights + o * layer.inputs..layer.weights + (o + 1) * layer.inputs];
                let s: f64 = row.iter().zip(x.iter()).map(|(w, v)| w * v).sum();
                pre[o] = s + p[layer.bias + o];
            }
            if l == last {
                out.copy_from_slice(pre);
            } else {
                for (dst, &z) in out.iter_mut().zip(pre.iter()) {
                    *dst = act.apply(z);
                }
                if let Some(mask) = trace.masks.get(l) {
                    for (dst, m) in out.iter_mut().zip(mask) {
                        *dst *= m;
                    }
                }
            }
        }
    }

    /// Backprop of `dlogits` through the traced pass, accumulating into `grad`.
    fn backprop(&self, input: &[f32], trace: &Trace, dlogits: &[f64], grad: &mut [f64]) {
        let act = self.arch.activation;
        let p = self.params;
        let last = self.dense.len() - 1;
        let mut delta: Vec<f64> = dlogits.to_vec();

        for l in (0..self.dense.len()).rev() {
            let layer = self.dense[l];
            if l != last {
                // delta holds dL/d(output of layer l); convert to dL/d(pre)
                let mask = trace.masks.get(l);
                for (o, d) in delta.iter_mut().enumerate() {
                    let m = mask.map(|m| m[o]).unwrap_or(1.0);
                    *d *= m * act.derivative(trace.pres[l][o]);
                }
            }
            let x = &trace.acts[l];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                grad[layer.bias + o] += d;
                let g = &mut grad[layer.weights + o * layer.inputs..layer.weights + (o + 1) * layer.inputs];
                for (gw, &xv) in g.iter_mut().zip(x.iter()) {
                    *gw += d * xv;
                }
            }
            if l == 0 && self.conv.is_none() {
                break;
            }
            let mut dx = vec![0.0; layer.inputs];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &p[layer.weights + o * layer.inputs..layer.weights + (o + 1) * layer.inputs];
                for (dxv, &w) in dx.iter_mut().zip(row) {
                    *dxv += d * w;
                }
            }
            delta = dx;
        }

        if let Some(c) = self.conv {
            // delta is now dL/d(pooled features)
            let shape = self.arch.input;
            let k = c.spec.kernel;
            let ch = shape.channels;
            let (oh, ow) = (c.out_h, c.out_w);
            let mut dpre = vec![0.0; trace.conv_pre.len()];
            for (o, &d) in delta.iter().enumerate() {
                let idx = trace.pool_arg[o];
                dpre[idx] += d * act.derivative(trace.conv_pre[idx]);
            }
            for f in 0..c.spec.filters {
                let dmap = &dpre[f * oh * ow..(f + 1) * oh * ow];
                grad[c.bias + f] += dmap.iter().sum::<f64>();
                let wbase = c.weights + f * ch * k * k;
                for cin in 0..ch {
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut s = 0.0;
                            for oy in 0..oh {
                                let drow = &dmap[oy * ow..(oy + 1) * ow];
                                let ibase = shape.offset(oy + ky, kx, cin);
                                for (ox, &d) in drow.iter().enumerate() {
                                    s += d * f64::from(input[ibase + ox * ch]);
                                }
                            }
                            grad[wbase + (cin * k + ky) * k + kx] += s;
                        }
                    }
                }
            }
        }
    }

    /// Turns logits into probabilities in place and returns `-log p[label]`.
    fn softmax_xent(logits: &mut [f64], label: usize) -> f64 {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let shifted = logits[label] - max;
        let mut z = 0.0;
        for v in logits.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in logits.iter_mut() {
            *v /= z;
        }
        z.ln() - shifted
    }

    pub fn forward(&self, input: &[f32]) -> Result<Vec<f64>, NnError> {
        self.check_input(input)?;
        let mut trace = self.new_trace();
        self.run(input, &mut trace);
        let mut logits = trace.acts.pop().expect("output layer");
        Self::softmax_xent(&mut logits, 0);
        Ok(logits)
    }

    /// Per-sample loss and, when `grad` is given, the accumulated CE gradient.
    fn sample_pass(
        &self,
        data: &LabeledDataset,
        index: usize,
        trace: &mut Trace,
        grad: Option<&mut [f64]>,
    ) -> f64 {
        let input = data.image(index);
        let label = data.label(index);
        self.run(input, trace);
        let mut probs = trace.acts.last().expect("output layer").clone();
        let loss = Self::softmax_xent(&mut probs, label);
        if let Some(g) = grad {
            probs[label] -= 1.0;
            self.backprop(input, trace, &probs, g);
        }
        loss
    }

    pub fn loss(&self, data: &LabeledDataset) -> Result<f64, NnError> {
        self.check_dataset(data)?;
        let mut trace = self.new_trace();
        let total: f64 = (0..data.len())
            .map(|i| self.sample_pass(data, i, &mut trace, None))
            .sum();
        Ok(total / data.len() as f64)
    }

    pub fn loss_and_grad(&self, batch: &LabeledDataset) -> Result<(f64, Vec<f64>), NnError> {
        let all: Vec<usize> = (0..batch.len()).collect();
        self.check_dataset(batch)?;
        Ok(self.minibatch::<rand_chacha::ChaCha8Rng>(batch, &all, None))
    }

    /// Mean loss and gradient over `indices`. With `dropout_rng`, a fresh
    /// dropout mask is drawn per sample.
    pub(crate) fn minibatch<R: Rng>(
        &self,
        data: &LabeledDataset,
        indices: &[usize],
        mut dropout_rng: Option<&mut R>,
    ) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.params.len()];
        let mut trace = self.new_trace();
        let rate = self.arch.dropout;
        let mut total = 0.0;
        for &i in indices {
            if let Some(rng) = dropout_rng.as_deref_mut() {
                trace.masks = self.dense[..self.dense.len() - 1]
                    .iter()
                    .map(|l| {
                        (0..l.outputs)
                            .map(|_| {
                                if rng.random::<f64>() < rate {
                                    0.0
                                } else {
                                    1.0 / (1.0 - rate)
                                }
                            })
                            .collect()
                    })
                    .collect();
            }
            total += self.sample_pass(data, i, &mut trace, Some(&mut grad));
        }
        let n = indices.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        (total / n, grad)
    }

    pub fn accuracy(&self, data: &LabeledDataset) -> Result<f64, NnError> {
        self.check_dataset(data)?;
        let mut trace = self.new_trace();
        let hits = (0..data.len())
            .filter(|&i| {
                self.run(data.image(i), &mut trace);
                argmax(trace.acts.last().expect("output layer")) == data.label(i)
            })
            .count();
        Ok(hits as f64 / data.len() as f64)
    }

    /// Fraction of samples predicted as `class`.
    pub fn prediction_rate(&self, data: &LabeledDataset, class: usize) -> Result<f64, NnError> {
        self.check_dataset(data)?;
        let mut trace = self.new_trace();
        let hits = (0..data.len())
            .filter(|&i| {
                self.run(data.image(i), &mut trace);
                argmax(trace.acts.last().expect("output layer")) == class
            })
            .count();
        Ok(hits as f64 / data.len() as f64)
    }

    pub fn per_sample_sq_grad(&self, data: &LabeledDataset) -> Result<Vec<f64>, NnError> {
        self.check_dataset(data)?;
        let mut trace = self.new_trace();
        let mut acc = vec![0.0; self.params.len()];
        let mut g = vec![0.0; self.params.len()];
        for i in 0..data.len() {
            g.iter_mut().for_each(|v| *v = 0.0);
            self.sample_pass(data, i, &mut trace, Some(&mut g));
            for (a, &v) in acc.iter_mut().zip(&g) {
                *a += v * v;
            }
        }
        let n = data.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_shapes, ImageShape};
    use crate::nn::{Activation, Architecture, Model};
    use crate::params::ParamVector;

    fn tiny_arch() -> Architecture {
        Architecture::mlp(2, vec![3], 2, Activation::Tanh)
    }

    #[test]
    fn zero_output_layer_gives_uniform_probabilities() {
        let arch = Architecture::desk_default();
        let mut model = Model::uniform_init(arch.clone(), 0.1, 1).unwrap();
        let mut params = model.params().clone();
        for i in arch.output_layer_range() {
            params.as_mut_slice()[i] = 0.0;
        }
        model = model.with_params(params).unwrap();
        let data = synthetic_shapes(5, 0.2, 2);
        for i in 0..data.len() {
            let p = model.forward(data.image(i)).unwrap();
            assert_eq!(p.len(), 10);
            for v in p {
                assert!((v - 0.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let model = Model::uniform_init(Architecture::desk_default(), 0.5, 3).unwrap();
        let data = synthetic_shapes(100, 0.3, 4);
        for i in 0..data.len() {
            let p = model.forward(data.image(i)).unwrap();
            assert!(p.iter().all(|&v| v >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    // Hand-evaluated 2-3-2 tanh network. Values below were worked out row by
    // row before the layer code existed:
    //   h_pre = W1 x + b1 = [0.1*0.5 + 0.2*(-1) + 0.0, -0.3*0.5 + 0.4*(-1) + 0.1, 0.5*0.5 + 0.0*(-1) - 0.2]
    //         = [-0.15, -0.45, 0.05]
    //   h     = tanh(h_pre)
    //   z     = W2 h + b2 with W2 = [[1, -1, 0.5], [-0.5, 0.25, 2]], b2 = [0.05, -0.05]
    #[test]
    fn forward_matches_hand_computed_toy_network() {
        let params = vec![
            0.1, 0.2, -0.3, 0.4, 0.5, 0.0, // W1 (3x2)
            0.0, 0.1, -0.2, // b1
            1.0, -1.0, 0.5, -0.5, 0.25, 2.0, // W2 (2x3)
            0.05, -0.05, // b2
        ];
        let arch = tiny_arch();
        let net = arch.network(&params).unwrap();
        let probs = net.forward(&[0.5, -1.0]).unwrap();

        let h = [(-0.15f64).tanh(), (-0.45f64).tanh(), (0.05f64).tanh()];
        let z0 = 1.0 * h[0] - 1.0 * h[1] + 0.5 * h[2] + 0.05;
        let z1 = -0.5 * h[0] + 0.25 * h[1] + 2.0 * h[2] - 0.05;
        let p0 = z0.exp() / (z0.exp() + z1.exp());
        assert!((probs[0] - p0).abs() < 1e-15);
        assert!((probs[1] - (1.0 - p0)).abs() < 1e-15);
        // frozen from a manual evaluation
        assert!((p0 - 0.581_542_480_328_718_7).abs() < 1e-12, "p0 = {p0}");
    }

    #[test]
    fn confident_correct_prediction_has_near_zero_loss_and_grad() {
        let arch = tiny_arch();
        let mut params = vec![0.0; arch.param_count()];
        // logits = [50, -50] regardless of input
        let out_bias = arch.param_count() - 2;
        params[out_bias] = 50.0;
        params[out_bias + 1] = -50.0;
        let data = LabeledDataset::new(ImageShape::new(1, 2, 1), 2, vec![0.3, 0.7], vec![0]).unwrap();
        let (loss, grad) = arch.network(&params).unwrap().loss_and_grad(&data).unwrap();
        assert!(loss < 1e-12);
        assert!(grad.iter().map(|g| g * g).sum::<f64>().sqrt() < 1e-12);
    }

    #[test]
    fn duplicating_the_batch_leaves_loss_and_grad_unchanged() {
        let model = Model::uniform_init(Architecture::desk_default(), 0.1, 5).unwrap();
        let data = synthetic_shapes(12, 0.2, 6);
        let doubled = data.concat(&data);
        let (l1, g1) = model.loss_and_grad(&data).unwrap();
        let (l2, g2) = model.loss_and_grad(&doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-9);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_batch_and_bad_input_are_errors() {
        let model = Model::uniform_init(Architecture::desk_default(), 0.1, 5).unwrap();
        let empty = LabeledDataset::empty(ImageShape::new(16, 16, 1), 10);
        assert_eq!(model.loss_and_grad(&empty), Err(NnError::EmptyBatch));
        assert_eq!(model.per_sample_sq_grad(&empty), Err(NnError::EmptyBatch));
        assert!(matches!(model.forward(&[0.0; 10]), Err(NnError::Shape { .. })));
    }

    #[test]
    fn single_sample_fisher_is_the_squared_gradient() {
        let model = Model::uniform_init(Architecture::desk_default(), 0.1, 8).unwrap();
        let data = synthetic_shapes(1, 0.2, 9);
        let (_, g) = model.loss_and_grad(&data).unwrap();
        let f = model.per_sample_sq_grad(&data).unwrap();
        for (fi, gi) in f.iter().zip(&g) {
            assert!((fi - gi * gi).abs() <= 1e-15 * (1.0 + fi.abs()));
        }
    }

    #[test]
    fn zero_weights_model_params_is_uniform_for_tiny_net() {
        let arch = tiny_arch();
        let model = Model::new(arch.clone(), ParamVector::zeros(arch.param_count())).unwrap();
        assert_eq!(model.forward(&[1.0, 1.0]).unwrap(), vec![0.5, 0.5]);
    }
}
