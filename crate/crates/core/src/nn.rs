//! Multilayer perceptrons and the Adam optimizer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientMap, Graph, NodeId, ParamId};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    pub(crate) fn code(self) -> u64 {
        match self {
            Activation::Tanh => 0,
            Activation::Identity => 1,
        }
    }

    pub(crate) fn from_code(code: u64) -> Option<Self> {
        match code {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Fully connected network. Weight `l` is stored `out x in`; the hidden
/// activation applies to every layer but the last, which is affine.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layer_dims: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    activation: Activation,
}

impl MlpParams {
    /// Xavier-normal weights (variance `2 / (fan_in + fan_out)`), zero biases.
    pub fn init(layer_dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(layer_dims, activation)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in &mut params.weights {
            let (fan_out, fan_in) = w.dims2();
            let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            w.data_mut().iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        }
        Ok(params)
    }

    pub fn zeros(layer_dims: &[usize], activation: Activation) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "an MLP needs at least input and output dims, got {layer_dims:?}"
            )));
        }
        if layer_dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("zero layer width in {layer_dims:?}")));
        }
        let weights = layer_dims.windows(2).map(|w| Tensor::zeros(&[w[1], w[0]])).collect();
        let biases = layer_dims[1..].iter().map(|&n| Tensor::zeros(&[n])).collect();
        Ok(Self { layer_dims: layer_dims.to_vec(), weights, biases, activation })
    }

    pub(crate) fn from_tensors(
        layer_dims: Vec<usize>,
        activation: Activation,
        tensors: Vec<Tensor>,
    ) -> Result<Self> {
        let mut p = Self::zeros(&layer_dims, activation)?;
        if tensors.len() != p.num_tensors() {
            return Err(Error::Shape(format!(
                "expected {} tensors, got {}",
                p.num_tensors(),
                tensors.len()
            )));
        }
        for (slot, t) in p.tensors_mut().into_iter().zip(tensors) {
            slot.expect_same_shape(&t)?;
            *slot = t;
        }
        Ok(p)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    /// Number of parameter tensors: one weight and one bias per layer.
    pub fn num_tensors(&self) -> usize {
        2 * self.weights.len()
    }

    /// Parameter tensors in declaration order `W0, b0, W1, b1, ...`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights.iter_mut().zip(self.biases.iter_mut()).flat_map(|(w, b)| [w, b]).collect()
    }

    /// Records the network on `graph`, registering its tensors as parameters
    /// `first, first+1, ...` in declaration order.
    pub fn forward(&self, graph: &mut Graph, input: NodeId, first: ParamId) -> Result<NodeId> {
        let in_shape = graph.value(input).shape();
        if in_shape.len() != 2 || in_shape[1] != self.input_dim() {
            return Err(Error::Shape(format!(
                "MLP expects batch x {} input, got {:?}",
                self.input_dim(),
                in_shape
            )));
        }
        let last = self.weights.len() - 1;
        let mut h = input;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let wn = graph.param(ParamId(first.0 + 2 * l), w.clone())?;
            let bn = graph.param(ParamId(first.0 + 2 * l + 1), b.clone())?;
            h = graph.matmul_bt(h, wn)?;
            h = graph.add_row(h, bn)?;
            if l < last && self.activation == Activation::Tanh {
                h = graph.tanh(h)?;
            }
        }
        Ok(h)
    }

    /// Graph-free evaluation on a `batch x in` matrix.
    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        if input.shape().len() != 2 || input.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "MLP expects batch x {} input, got {:?}",
                self.input_dim(),
                input.shape()
            )));
        }
        let rows = input.rows();
        let last = self.weights.len() - 1;
        let mut h = input.clone();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (out_dim, in_dim) = w.dims2();
            let mut next = vec![0.0; rows * out_dim];
            gemm(rows, in_dim, out_dim, h.data(), (in_dim, 1), w.data(), (1, in_dim), &mut next, 0.0);
            for chunk in next.chunks_exact_mut(out_dim) {
                chunk.iter_mut().zip(b.data()).for_each(|(o, bi)| *o += bi);
                if l < last && self.activation == Activation::Tanh {
                    chunk.iter_mut().for_each(|o| *o = o.tanh());
                }
            }
            h = Tensor::from_parts(vec![rows, out_dim], next);
        }
        Ok(h)
    }
}

/// Adam hyperparameters. Defaults match the usual library defaults with a
/// base learning rate of `1e-4`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    config: AdamConfig,
}

impl AdamState {
    pub fn new(params: &[&Tensor], config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { step: 0, first: zeros(), second: zeros(), config }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// One bias-corrected Adam update at the configured learning rate.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &GradientMap) -> Result<()> {
        let lr = self.config.lr;
        self.step_with_lr(params, grads, lr)
    }

    /// One update at an explicit learning rate (for schedules). Parameter `i`
    /// reads its gradient from `ParamId(i)`.
    pub fn step_with_lr(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &GradientMap,
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {}",
                self.first.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            let g = grads
                .get(ParamId(i))
                .ok_or_else(|| Error::InvalidArgument(format!("missing gradient for parameter {i}")))?;
            p.expect_same_shape(g)?;
            self.first[i].expect_same_shape(g)?;
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, epsilon, .. } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads.get(ParamId(i)).unwrap().data();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *mj = beta1 * *mj + (1.0 - beta1) * gj;
                *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
                let m_hat = *mj / c1;
                let v_hat = *vj / c2;
                *pj -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Step decay: `base_lr * 0.5^floor(epoch / half_every)`.
pub fn lr_schedule(base_lr: f64, epoch: usize, half_every: usize) -> f64 {
    let halvings = epoch / half_every.max(1);
    base_lr * 0.5f64.powi(halvings.min(i32::MAX as usize) as i32)
}
