//! Small differentiable models with exact per-sample gradients.
//!
//! Three architectures are supported: multinomial logistic regression, a tanh
//! MLP and a two-layer strided tanh CNN. All arithmetic is `f64`. A model with
//! one output unit uses a sigmoid and binary cross-entropy; with two or more it
//! uses softmax and categorical cross-entropy.

pub mod hessian;
mod layers;
mod param;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::GroupedDataset;
use crate::error::{Error, Result};

pub use hessian::{
    hutchinson_trace, hvp, max_eigenvalue, EigenEstimate, GradientField, HvpMethod, HvpResult,
    ModelObjective, QuadraticObjective, TraceEstimate,
};
pub use param::{axpy, cosine, dot, norm, ParamVector};

use layers::{conv_out, CnnShape, Workspace};

/// Rows per parallel chunk when reducing over a dataset. Fixed so that sums do
/// not depend on the number of worker threads.
const REDUCE_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Logistic {
        inputs: usize,
        outputs: usize,
    },
    Mlp {
        inputs: usize,
        hidden: Vec<usize>,
        outputs: usize,
    },
    Cnn {
        channels: usize,
        height: usize,
        width: usize,
        conv1: usize,
        conv2: usize,
        kernel: usize,
        stride: usize,
        outputs: usize,
    },
}

impl Architecture {
    /// The digit classifier: 32 then 16 channels, 3x3 kernels, stride 2.
    pub fn mnist_cnn() -> Self {
        Architecture::Cnn {
            channels: 1,
            height: 28,
            width: 28,
            conv1: 32,
            conv2: 16,
            kernel: 3,
            stride: 2,
            outputs: 10,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Architecture::Logistic { inputs, .. } | Architecture::Mlp { inputs, .. } => *inputs,
            Architecture::Cnn {
                channels,
                height,
                width,
                ..
            } => channels * height * width,
        }
    }

    pub fn outputs(&self) -> usize {
        match self {
            Architecture::Logistic { outputs, .. }
            | Architecture::Mlp { outputs, .. }
            | Architecture::Cnn { outputs, .. } => *outputs,
        }
    }

    /// Number of classes predicted; a single sigmoid output counts as two.
    pub fn num_classes(&self) -> usize {
        self.outputs().max(2)
    }

    pub(crate) fn layer_sizes(&self) -> Vec<usize> {
        match self {
            Architecture::Logistic { inputs, outputs } => vec![*inputs, *outputs],
            Architecture::Mlp {
                inputs,
                hidden,
                outputs,
            } => {
                let mut s = vec![*inputs];
                s.extend(hidden);
                s.push(*outputs);
                s
            }
            Architecture::Cnn { .. } => Vec::new(),
        }
    }

    pub(crate) fn cnn_shape(&self) -> Option<CnnShape> {
        match *self {
            Architecture::Cnn {
                channels,
                height,
                width,
                conv1,
                conv2,
                kernel,
                stride,
                outputs,
            } => {
                let h1 = conv_out(height, kernel, stride);
                let w1 = conv_out(width, kernel, stride);
                Some(CnnShape {
                    in_c: channels,
                    in_h: height,
                    in_w: width,
                    c1: conv1,
                    c2: conv2,
                    k: kernel,
                    stride,
                    h1,
                    w1,
                    h2: conv_out(h1, kernel, stride),
                    w2: conv_out(w1, kernel, stride),
                    classes: outputs,
                })
            }
            _ => None,
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Architecture::Logistic { .. } | Architecture::Mlp { .. } => self
                .layer_sizes()
                .windows(2)
                .map(|w| w[0] * w[1] + w[1])
                .sum(),
            Architecture::Cnn { .. } => self.cnn_shape().map_or(0, |s| s.offsets()[6]),
        }
    }

    /// `(offset, len, fan_in)` for each weight or bias block in parameter order.
    fn blocks(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        match self {
            Architecture::Logistic { .. } | Architecture::Mlp { .. } => {
                let mut off = 0;
                for w in self.layer_sizes().windows(2) {
                    out.push((off, w[0] * w[1], w[0]));
                    out.push((off + w[0] * w[1], w[1], w[0]));
                    off += w[0] * w[1] + w[1];
                }
            }
            Architecture::Cnn { .. } => {
                let s = self.cnn_shape().expect("cnn shape");
                let o = s.offsets();
                let fans = [s.k1(), s.k1(), s.k2(), s.k2(), s.flat(), s.flat()];
                for b in 0..6 {
                    out.push((o[b], o[b + 1] - o[b], fans[b]));
                }
            }
        }
        out
    }

    fn validate(&self) -> Result<()> {
        if self.outputs() == 0 || self.input_dim() == 0 {
            return Err(Error::config(
                "architecture needs nonzero input and output sizes",
            ));
        }
        if let Architecture::Mlp { hidden, .. } = self {
            if hidden.iter().any(|&h| h == 0) {
                return Err(Error::config("hidden layer of width zero"));
            }
        }
        if let Some(s) = self.cnn_shape() {
            if s.k == 0 || s.stride == 0 || s.h2 == 0 || s.w2 == 0 || s.c1 == 0 || s.c2 == 0 {
                return Err(Error::config("convolution shapes collapse to zero"));
            }
        }
        Ok(())
    }
}

/// Loss and accuracy over one subset of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsetEval {
    pub count: usize,
    pub accuracy: f64,
    pub loss: f64,
}

/// Per-group and overall evaluation of a model on a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub overall: SubsetEval,
    pub groups: BTreeMap<u32, SubsetEval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    architecture: Architecture,
    params: ParamVector,
}

impl Model {
    /// Fan-in scaled uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new(architecture: Architecture, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Model::init_with(architecture, &mut rng)
    }

    pub fn init_with<R: Rng + ?Sized>(architecture: Architecture, rng: &mut R) -> Result<Self> {
        architecture.validate()?;
        let mut params = ParamVector::zeros(architecture.num_params());
        for (off, len, fan_in) in architecture.blocks() {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            for v in &mut params[off..off + len] {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(Model {
            architecture,
            params,
        })
    }

    pub fn from_params(architecture: Architecture, params: ParamVector) -> Result<Self> {
        architecture.validate()?;
        if params.len() != architecture.num_params() {
            return Err(Error::DimensionMismatch {
                expected: architecture.num_params(),
                actual: params.len(),
            });
        }
        Ok(Model {
            architecture,
            params,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    /// Replace the parameters; the length must not change.
    pub fn set_params(&mut self, params: ParamVector) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                expected: self.params.len(),
                actual: params.len(),
            });
        }
        self.params = params;
        Ok(())
    }

    /// `theta += alpha * direction`
    pub fn step(&mut self, alpha: f64, direction: &[f64]) {
        self.params.axpy(alpha, direction);
    }

    pub(crate) fn with_params_view<'a>(&'a self, params: &'a [f64]) -> ModelView<'a> {
        ModelView {
            arch: &self.architecture,
            params,
        }
    }

    fn view(&self) -> ModelView<'_> {
        self.with_params_view(&self.params)
    }

    pub fn check_input(&self, data: &GroupedDataset) -> Result<()> {
        if data.dim() != self.architecture.input_dim() {
            return Err(Error::config(format!(
                "dataset has {} features but the model expects {}",
                data.dim(),
                self.architecture.input_dim()
            )));
        }
        if data.num_classes() > self.architecture.num_classes() {
            return Err(Error::config(format!(
                "dataset has {} classes but the model predicts {}",
                data.num_classes(),
                self.architecture.num_classes()
            )));
        }
        Ok(())
    }

    /// Class probabilities for one input.
    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let mut ws = Workspace::new(&self.architecture);
        self.view().probabilities(x, &mut ws)
    }

    /// Per-sample loss for one example.
    pub fn sample_loss(&self, x: &[f64], y: u32) -> f64 {
        let mut ws = Workspace::new(&self.architecture);
        self.view().loss(x, y, &mut ws)
    }

    /// Gradient of the per-sample loss; returns the loss.
    pub fn sample_gradient(&self, x: &[f64], y: u32, grad: &mut [f64]) -> f64 {
        let mut ws = Workspace::new(&self.architecture);
        self.view().loss_and_grad(x, y, &mut ws, grad)
    }

    /// One gradient per listed row, in order.
    pub fn per_sample_gradients(
        &self,
        data: &GroupedDataset,
        indices: &[usize],
    ) -> Result<Vec<ParamVector>> {
        self.check_input(data)?;
        if indices.is_empty() {
            return Err(Error::config("per-sample gradients of an empty batch"));
        }
        Ok(self
            .view()
            .per_sample_gradients(data, indices)
            .into_iter()
            .map(|(_, g)| g)
            .collect())
    }

    /// Per-sample `(loss, gradient)` pairs, in order.
    pub fn per_sample_losses_and_gradients(
        &self,
        data: &GroupedDataset,
        indices: &[usize],
    ) -> Result<Vec<(f64, ParamVector)>> {
        self.check_input(data)?;
        if indices.is_empty() {
            return Err(Error::config("per-sample gradients of an empty batch"));
        }
        Ok(self.view().per_sample_gradients(data, indices))
    }

    /// Mean gradient over one group, or over all rows when `group` is `None`.
    pub fn group_mean_gradient(
        &self,
        data: &GroupedDataset,
        group: Option<u32>,
    ) -> Result<ParamVector> {
        self.check_input(data)?;
        let indices = match group {
            Some(g) => data.group_indices(g),
            None => data.all_indices(),
        };
        if indices.is_empty() {
            return Err(Error::EmptyGroup(group.unwrap_or(u32::MAX)));
        }
        Ok(self.view().mean_gradient(data, &indices))
    }

    /// Mean gradient over the listed rows.
    pub fn mean_gradient(&self, data: &GroupedDataset, indices: &[usize]) -> Result<ParamVector> {
        self.check_input(data)?;
        if indices.is_empty() {
            return Err(Error::config("mean gradient of an empty subset"));
        }
        Ok(self.view().mean_gradient(data, indices))
    }

    /// Mean loss over the listed rows.
    pub fn mean_loss(&self, data: &GroupedDataset, indices: &[usize]) -> Result<f64> {
        self.check_input(data)?;
        if indices.is_empty() {
            return Err(Error::config("mean loss of an empty subset"));
        }
        let v = self.view();
        let sums: Vec<f64> = indices
            .par_chunks(REDUCE_CHUNK)
            .map_init(
                || Workspace::new(&self.architecture),
                |ws, chunk| {
                    chunk
                        .iter()
                        .map(|&i| v.loss(data.row(i), data.label(i), ws))
                        .sum::<f64>()
                },
            )
            .collect();
        Ok(sums.iter().sum::<f64>() / indices.len() as f64)
    }

    /// Positive-class probability and its parameter gradient for a binary model.
    pub fn positive_probability_gradient(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        if self.architecture.num_classes() != 2 {
            return Err(Error::config(
                "positive-class probability needs a binary model",
            ));
        }
        let mut ws = Workspace::new(&self.architecture);
        Ok(self.view().positive_probability_grad(x, &mut ws, grad))
    }

    /// Accuracy and mean loss overall and per group.
    pub fn evaluate(&self, data: &GroupedDataset) -> Result<Evaluation> {
        self.check_input(data)?;
        let v = self.view();
        let rows: Vec<usize> = data.all_indices();
        let per_chunk: Vec<Vec<(bool, f64)>> = rows
            .par_chunks(REDUCE_CHUNK)
            .map_init(
                || Workspace::new(&self.architecture),
                |ws, chunk| {
                    chunk
                        .iter()
                        .map(|&i| {
                            let y = data.label(i);
                            let probs = v.probabilities(data.row(i), ws);
                            let pred = argmax(&probs);
                            (pred == y as usize, v.loss(data.row(i), y, ws))
                        })
                        .collect()
                },
            )
            .collect();
        let mut overall = (0usize, 0usize, 0.0f64);
        let mut groups: BTreeMap<u32, (usize, usize, f64)> = BTreeMap::new();
        for (i, (correct, loss)) in per_chunk.into_iter().flatten().enumerate() {
            let e = groups.entry(data.group(i)).or_insert((0, 0, 0.0));
            for acc in [&mut overall, e] {
                acc.0 += 1;
                acc.1 += correct as usize;
                acc.2 += loss;
            }
        }
        let finish = |(n, c, l): (usize, usize, f64)| SubsetEval {
            count: n,
            accuracy: if n == 0 { 0.0 } else { c as f64 / n as f64 },
            loss: if n == 0 { 0.0 } else { l / n as f64 },
        };
        Ok(Evaluation {
            overall: finish(overall),
            groups: groups.into_iter().map(|(g, t)| (g, finish(t))).collect(),
        })
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable `log(1 + exp(z))`.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}

/// Architecture plus a borrowed parameter slice, so gradients can be taken at
/// perturbed points without cloning a [`Model`].
#[derive(Clone, Copy)]
pub(crate) struct ModelView<'a> {
    arch: &'a Architecture,
    params: &'a [f64],
}

impl<'a> ModelView<'a> {
    pub fn new(arch: &'a Architecture, params: &'a [f64]) -> Self {
        ModelView { arch, params }
    }

    fn probabilities(&self, x: &[f64], ws: &mut Workspace) -> Vec<f64> {
        layers::forward(self.arch, self.params, x, ws);
        let logits = ws.logits();
        if logits.len() == 1 {
            let p = sigmoid(logits[0]);
            vec![1.0 - p, p]
        } else {
            softmax(logits)
        }
    }

    fn loss(&self, x: &[f64], y: u32, ws: &mut Workspace) -> f64 {
        layers::forward(self.arch, self.params, x, ws);
        let logits = ws.logits();
        if logits.len() == 1 {
            softplus(logits[0]) - y as f64 * logits[0]
        } else {
            log_sum_exp(logits) - logits[y as usize]
        }
    }

    fn loss_and_grad(&self, x: &[f64], y: u32, ws: &mut Workspace, grad: &mut [f64]) -> f64 {
        layers::forward(self.arch, self.params, x, ws);
        let logits = ws.logits();
        let (loss, d_logits) = if logits.len() == 1 {
            let z = logits[0];
            (softplus(z) - y as f64 * z, vec![sigmoid(z) - y as f64])
        } else {
            let mut p = softmax(logits);
            let loss = log_sum_exp(logits) - logits[y as usize];
            p[y as usize] -= 1.0;
            (loss, p)
        };
        layers::backward(self.arch, self.params, x, ws, &d_logits, grad);
        loss
    }

    fn positive_probability_grad(&self, x: &[f64], ws: &mut Workspace, grad: &mut [f64]) -> f64 {
        layers::forward(self.arch, self.params, x, ws);
        let logits = ws.logits();
        let (p1, d_logits) = if logits.len() == 1 {
            let p = sigmoid(logits[0]);
            (p, vec![p * (1.0 - p)])
        } else {
            let p = softmax(logits);
            let p1 = p[1];
            let d: Vec<f64> = p
                .iter()
                .enumerate()
                .map(|(k, &pk)| p1 * (if k == 1 { 1.0 } else { 0.0 } - pk))
                .collect();
            (p1, d)
        };
        layers::backward(self.arch, self.params, x, ws, &d_logits, grad);
        p1
    }

    pub fn per_sample_gradients(
        &self,
        data: &GroupedDataset,
        indices: &[usize],
    ) -> Vec<(f64, ParamVector)> {
        let d = self.params.len();
        indices
            .par_iter()
            .map_init(
                || Workspace::new(self.arch),
                |ws, &i| {
                    let mut g = ParamVector::zeros(d);
                    let loss = self.loss_and_grad(data.row(i), data.label(i), ws, &mut g);
                    (loss, g)
                },
            )
            .collect()
    }

    /// Per-sample positive-class probabilities and their gradients.
    pub fn positive_probability_gradients(
        &self,
        data: &GroupedDataset,
        indices: &[usize],
    ) -> Vec<(f64, ParamVector)> {
        let d = self.params.len();
        indices
            .par_iter()
            .map_init(
                || Workspace::new(self.arch),
                |ws, &i| {
                    let mut g = ParamVector::zeros(d);
                    let p = self.positive_probability_grad(data.row(i), ws, &mut g);
                    (p, g)
                },
            )
            .collect()
    }

    pub fn mean_gradient(&self, data: &GroupedDataset, indices: &[usize]) -> ParamVector {
        let d = self.params.len();
        let partial: Vec<Vec<f64>> = indices
            .par_chunks(REDUCE_CHUNK)
            .map_init(
                || (Workspace::new(self.arch), vec![0.0; d]),
                |(ws, g), chunk| {
                    let mut acc = vec![0.0; d];
                    for &i in chunk {
                        self.loss_and_grad(data.row(i), data.label(i), ws, g);
                        axpy(&mut acc, 1.0, g);
                    }
                    acc
                },
            )
            .collect();
        let mut total = ParamVector::zeros(d);
        for p in &partial {
            total.axpy(1.0, p);
        }
        total.scale_in_place(1.0 / indices.len() as f64);
        total
    }
}

impl Model {
    /// Per-sample `(p_1, grad p_1)` for a binary model.
    pub fn positive_probability_gradients(
        &self,
        data: &GroupedDataset,
        indices: &[usize],
    ) -> Result<Vec<(f64, ParamVector)>> {
        self.check_input(data)?;
        if self.architecture.num_classes() != 2 {
            return Err(Error::config(
                "positive-class probability needs a binary model",
            ));
        }
        Ok(self.view().positive_probability_gradients(data, indices))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    #[test]
    fn parameter_counts() {
        let lr = Architecture::Logistic {
            inputs: 59,
            outputs: 2,
        };
        assert_eq!(lr.num_params(), 120);
        let mlp = Architecture::Mlp {
            inputs: 98,
            hidden: vec![256, 256],
            outputs: 2,
        };
        assert_eq!(mlp.num_params(), 91_650);
        assert_eq!(Architecture::mnist_cnn().num_params(), 10_714);
    }

    #[test]
    fn sigmoid_and_softplus_are_stable() {
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let m = Model::new(Architecture::mnist_cnn(), 1).unwrap();
        let x: Vec<f64> = (0..784).map(|i| (i % 7) as f64 / 7.0).collect();
        let p = m.predict_proba(&x);
        assert_eq!(p.len(), 10);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn evaluate_counts_every_row() {
        let data = GroupedDataset::new(
            "t",
            Split::Full,
            2,
            vec![0.0, 1.0, 1.0, 0.0, 2.0, 2.0],
            vec![0, 1, 1],
            vec![0, 1, 1],
            2,
        )
        .unwrap();
        let m = Model::new(
            Architecture::Logistic {
                inputs: 2,
                outputs: 2,
            },
            0,
        )
        .unwrap();
        let e = m.evaluate(&data).unwrap();
        assert_eq!(e.overall.count, 3);
        assert_eq!(e.groups[&1].count, 2);
    }

    #[test]
    fn rejects_wrong_parameter_length() {
        let arch = Architecture::Logistic {
            inputs: 2,
            outputs: 1,
        };
        assert!(Model::from_params(arch, ParamVector::zeros(2)).is_err());
    }
}
