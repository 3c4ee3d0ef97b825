//! Gaussian VAE with a diagonal-covariance encoder and an isotropic Gaussian
//! decoder whose variance `gamma` is a trainable scalar (stored as its log).
//!
//! The negative ELBO minimized here is, per data point,
//!
//! ```text
//! 1/2 [ |x - mu_x|^2 / gamma + d log(2 pi gamma) ]
//!   + 1/2 sum_j [ exp(logvar_j) + mu_j^2 - logvar_j - 1 ]
//! ```
//!
//! with one reparameterized draw of `z` per data point.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamId};
use crate::error::{Error, Result};
use crate::nn::{lr_schedule, Activation, AdamConfig, AdamState, MlpParams};
use crate::rng::standard_normal;
use crate::tensor::Tensor;

/// Encoder log-variances are clamped to this range before exponentiation.
pub const LOGVAR_MIN: f64 = -20.0;
pub const LOGVAR_MAX: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    encoder_mu: MlpParams,
    encoder_logvar: MlpParams,
    decoder_mu: MlpParams,
    log_gamma: Tensor,
    kappa: usize,
    ambient_dim: usize,
}

impl VaeModel {
    /// Randomly initialized model `d -> hidden.. -> kappa -> hidden.. -> d`,
    /// with `gamma = 1`.
    pub fn new(ambient_dim: usize, kappa: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let (enc, dec) = layer_plan(ambient_dim, kappa, hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut next = || rand::Rng::random::<u64>(&mut rng);
        Self::from_parts(
            MlpParams::init(&enc, Activation::Tanh, next())?,
            MlpParams::init(&enc, Activation::Tanh, next())?,
            MlpParams::init(&dec, Activation::Tanh, next())?,
            0.0,
        )
    }

    /// All weights and biases zero: `mu_z = 0`, `Sigma_z = I`, `mu_x = 0`.
    pub fn zeros(ambient_dim: usize, kappa: usize, hidden: &[usize]) -> Result<Self> {
        let (enc, dec) = layer_plan(ambient_dim, kappa, hidden);
        Self::from_parts(
            MlpParams::zeros(&enc, Activation::Tanh)?,
            MlpParams::zeros(&enc, Activation::Tanh)?,
            MlpParams::zeros(&dec, Activation::Tanh)?,
            0.0,
        )
    }

    pub fn from_parts(
        encoder_mu: MlpParams,
        encoder_logvar: MlpParams,
        decoder_mu: MlpParams,
        log_gamma: f64,
    ) -> Result<Self> {
        let ambient_dim = encoder_mu.input_dim();
        let kappa = encoder_mu.output_dim();
        if encoder_logvar.input_dim() != ambient_dim || encoder_logvar.output_dim() != kappa {
            return Err(Error::Shape(format!(
                "encoder_logvar maps {}->{}, expected {ambient_dim}->{kappa}",
                encoder_logvar.input_dim(),
                encoder_logvar.output_dim()
            )));
        }
        if decoder_mu.input_dim() != kappa || decoder_mu.output_dim() != ambient_dim {
            return Err(Error::Shape(format!(
                "decoder maps {}->{}, expected {kappa}->{ambient_dim}",
                decoder_mu.input_dim(),
                decoder_mu.output_dim()
            )));
        }
        if !log_gamma.is_finite() {
            return Err(Error::NonFinite("log_gamma".into()));
        }
        Ok(Self {
            encoder_mu,
            encoder_logvar,
            decoder_mu,
            log_gamma: Tensor::scalar(log_gamma),
            kappa,
            ambient_dim,
        })
    }

    pub fn kappa(&self) -> usize {
        self.kappa
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn log_gamma(&self) -> f64 {
        self.log_gamma.item()
    }

    pub fn gamma(&self) -> f64 {
        self.log_gamma().exp()
    }

    pub fn set_log_gamma(&mut self, value: f64) {
        self.log_gamma = Tensor::scalar(value);
    }

    pub fn encoder_mu(&self) -> &MlpParams {
        &self.encoder_mu
    }

    pub fn encoder_logvar(&self) -> &MlpParams {
        &self.encoder_logvar
    }

    pub fn decoder_mu(&self) -> &MlpParams {
        &self.decoder_mu
    }

    /// Every trainable tensor in declaration order: encoder mean net, encoder
    /// log-variance net, decoder mean net, then `log_gamma`. Position `i` is
    /// `ParamId(i)` on graphs built by this model.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = self.encoder_mu.tensors();
        out.extend(self.encoder_logvar.tensors());
        out.extend(self.decoder_mu.tensors());
        out.push(&self.log_gamma);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.encoder_mu.tensors_mut();
        out.extend(self.encoder_logvar.tensors_mut());
        out.extend(self.decoder_mu.tensors_mut());
        out.push(&mut self.log_gamma);
        out
    }

    /// Rebuilds a model of the same architecture from a parameter list.
    pub fn with_parameters(&self, params: &[Tensor]) -> Result<Self> {
        let mut m = self.clone();
        let slots = m.parameters_mut();
        if slots.len() != params.len() {
            return Err(Error::Shape(format!(
                "model has {} parameter tensors, got {}",
                slots.len(),
                params.len()
            )));
        }
        for (slot, p) in slots.into_iter().zip(params) {
            slot.expect_same_shape(p)?;
            *slot = p.clone();
        }
        Ok(m)
    }

    fn param_offsets(&self) -> (ParamId, ParamId, ParamId, ParamId) {
        let a = self.encoder_mu.num_tensors();
        let b = a + self.encoder_logvar.num_tensors();
        let c = b + self.decoder_mu.num_tensors();
        (ParamId(0), ParamId(a), ParamId(b), ParamId(c))
    }

    /// Records both encoder nets on `graph`; the log-variance is clamped.
    pub fn encode_graph(&self, graph: &mut Graph, x: NodeId) -> Result<(NodeId, NodeId)> {
        let (mu_id, lv_id, _, _) = self.param_offsets();
        let mu = self.encoder_mu.forward(graph, x, mu_id)?;
        let raw = self.encoder_logvar.forward(graph, x, lv_id)?;
        let logvar = graph.clamp(raw, LOGVAR_MIN, LOGVAR_MAX)?;
        Ok((mu, logvar))
    }

    pub fn decode_graph(&self, graph: &mut Graph, z: NodeId) -> Result<NodeId> {
        let (_, _, dec_id, _) = self.param_offsets();
        self.decoder_mu.forward(graph, z, dec_id)
    }

    pub fn log_gamma_graph(&self, graph: &mut Graph) -> Result<NodeId> {
        let (_, _, _, lg_id) = self.param_offsets();
        graph.param(lg_id, self.log_gamma.clone())
    }

    /// Posterior mean and clamped log-variance for a `batch x d` input.
    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mu = self.encoder_mu.apply(x)?;
        let logvar = self.encoder_logvar.apply(x)?.map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX));
        Ok((mu, logvar))
    }

    /// Decoder mean for a `batch x kappa` input.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.decoder_mu.apply(z)
    }

    /// Mean-encode then decode.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let (mu, _) = self.encode(x)?;
        self.decode(&mu)
    }
}

fn layer_plan(d: usize, kappa: usize, hidden: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut enc = vec![d];
    enc.extend_from_slice(hidden);
    enc.push(kappa);
    let mut dec = vec![kappa];
    dec.extend_from_slice(hidden);
    dec.push(d);
    (enc, dec)
}

/// `z = mu + exp(logvar / 2) * eps`, differentiable in `mu` and `logvar`.
pub fn reparameterize(graph: &mut Graph, mu: NodeId, logvar: NodeId, eps: NodeId) -> Result<NodeId> {
    let half = graph.scale(logvar, 0.5)?;
    let std = graph.exp(half)?;
    let noise = graph.mul(std, eps)?;
    graph.add(mu, noise)
}

/// Batch mean of `1/2 sum_j (exp(logvar_j) + mu_j^2 - logvar_j - 1)`.
pub fn kl_term(graph: &mut Graph, mu: NodeId, logvar: NodeId) -> Result<NodeId> {
    let shape = graph.value(mu).shape().to_vec();
    if shape != graph.value(logvar).shape() || shape.len() != 2 {
        return Err(Error::Shape(format!(
            "kl_term needs equal batch x kappa shapes, got {:?} and {:?}",
            shape,
            graph.value(logvar).shape()
        )));
    }
    let (batch, kappa) = (shape[0] as f64, shape[1] as f64);
    let var = graph.exp(logvar)?;
    let mu2 = graph.square(mu)?;
    let t = graph.add(var, mu2)?;
    let t = graph.sub(t, logvar)?;
    let s = graph.sum(t)?;
    let s = graph.scale(s, 0.5 / batch)?;
    let offset = graph.constant(-0.5 * kappa);
    graph.add(s, offset)
}

/// Batch mean of `1/2 [ |x - mu_x|^2 / gamma + d log(2 pi gamma) ]`.
pub fn recon_term(graph: &mut Graph, x: NodeId, mu_x: NodeId, log_gamma: NodeId) -> Result<NodeId> {
    let shape = graph.value(x).shape().to_vec();
    if shape != graph.value(mu_x).shape() || shape.len() != 2 {
        return Err(Error::Shape(format!(
            "recon_term needs equal batch x d shapes, got {:?} and {:?}",
            shape,
            graph.value(mu_x).shape()
        )));
    }
    let (batch, d) = (shape[0] as f64, shape[1] as f64);
    let diff = graph.sub(x, mu_x)?;
    let sq = graph.square(diff)?;
    let sse = graph.sum(sq)?;
    let neg_lg = graph.scale(log_gamma, -1.0)?;
    let inv_gamma = graph.exp(neg_lg)?;
    let quad = graph.mul(sse, inv_gamma)?;
    let quad = graph.scale(quad, 0.5 / batch)?;
    let log_part = graph.scale(log_gamma, 0.5 * d)?;
    let log_const = graph.constant(0.5 * d * (2.0 * PI).ln());
    let log_part = graph.add(log_part, log_const)?;
    graph.add(quad, log_part)
}

/// Node handles produced by [`elbo_loss`].
#[derive(Debug, Clone, Copy)]
pub struct ElboNodes {
    pub loss: NodeId,
    pub recon: NodeId,
    pub kl: NodeId,
    pub mu_z: NodeId,
    pub logvar_z: NodeId,
    pub mu_x: NodeId,
}

/// Negative ELBO for a minibatch with a fixed noise draw `eps` (`batch x kappa`).
pub fn elbo_loss(model: &VaeModel, graph: &mut Graph, x: &Tensor, eps: &Tensor) -> Result<ElboNodes> {
    let (batch, _) = x.dims2();
    if eps.shape() != [batch, model.kappa()] {
        return Err(Error::Shape(format!(
            "noise must be {batch}x{}, got {:?}",
            model.kappa(),
            eps.shape()
        )));
    }
    let xn = graph.input(x.clone());
    let (mu_z, logvar_z) = model.encode_graph(graph, xn)?;
    let en = graph.input(eps.clone());
    let z = reparameterize(graph, mu_z, logvar_z, en)?;
    let mu_x = model.decode_graph(graph, z)?;
    let lg = model.log_gamma_graph(graph)?;
    let recon = recon_term(graph, xn, mu_x, lg)?;
    let kl = kl_term(graph, mu_z, logvar_z)?;
    let loss = graph.add(recon, kl)?;
    Ok(ElboNodes { loss, recon, kl, mu_z, logvar_z, mu_x })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_half_every: usize,
    pub seed: u64,
    pub gamma_trainable: bool,
    pub fixed_gamma: f64,
    /// Starting value of a trainable `log gamma`; `None` keeps the model's.
    pub initial_log_gamma: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            batch_size: 100,
            base_lr: 1e-4,
            lr_half_every: 150,
            seed: 0,
            gamma_trainable: true,
            fixed_gamma: 1.0,
            initial_log_gamma: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.lr_half_every == 0 {
            return Err(Error::config("lr_half_every", "must be at least 1"));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("base_lr", "must be a finite non-negative number"));
        }
        if !(self.fixed_gamma > 0.0 && self.fixed_gamma.is_finite()) {
            return Err(Error::config("fixed_gamma", "must be positive"));
        }
        if self.initial_log_gamma.is_some_and(|v| !v.is_finite()) {
            return Err(Error::config("initial_log_gamma", "must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub neg_elbo: f64,
    pub recon_mse: f64,
    pub kl: f64,
    pub log_gamma: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
}

impl TrainTrace {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Shuffled-minibatch Adam on the negative ELBO.
///
/// Shuffling and reparameterization noise come from one stream seeded by
/// `config.seed`, so a run is a pure function of `(model, data, config)`.
/// With `gamma_trainable == false` the decoder variance is pinned to
/// `config.fixed_gamma`. `epochs == 0` returns the model untouched.
pub fn train(mut model: VaeModel, data: &Tensor, config: &TrainConfig) -> Result<(VaeModel, TrainTrace)> {
    config.validate()?;
    if data.shape().len() != 2 || data.cols() != model.ambient_dim() {
        return Err(Error::Shape(format!(
            "training data must be n x {}, got {:?}",
            model.ambient_dim(),
            data.shape()
        )));
    }
    let n = data.rows();
    if n < config.batch_size {
        return Err(Error::InvalidArgument(format!(
            "need at least batch_size={} rows, got {n}",
            config.batch_size
        )));
    }
    let mut trace = TrainTrace::default();
    if config.epochs == 0 {
        return Ok((model, trace));
    }
    if !config.gamma_trainable {
        model.set_log_gamma(config.fixed_gamma.ln());
    } else if let Some(v) = config.initial_log_gamma {
        model.set_log_gamma(v);
    }
    let lg_index = model.parameters().len() - 1;
    let adam_cfg = AdamConfig { lr: config.base_lr, ..AdamConfig::default() };
    let mut adam = AdamState::new(&model.parameters(), adam_cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let d = model.ambient_dim() as f64;
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let lr = lr_schedule(config.base_lr, epoch, config.lr_half_every);
        order.shuffle(&mut rng);
        let (mut sum_loss, mut sum_sse, mut sum_kl) = (0.0, 0.0, 0.0);
        for idx in order.chunks(config.batch_size) {
            let x = data.select_rows(idx);
            let eps = standard_normal(&mut rng, idx.len(), model.kappa());
            let mut graph = Graph::new();
            let diverged = || Error::Diverged { epoch, step, trace: trace.clone() };
            let nodes = match elbo_loss(&model, &mut graph, &x, &eps) {
                Ok(nodes) => nodes,
                Err(Error::NonFinite(_) | Error::Domain(_)) => return Err(diverged()),
                Err(e) => return Err(e),
            };
            let loss = graph.value(nodes.loss).item();
            if !loss.is_finite() {
                return Err(diverged());
            }
            let b = idx.len() as f64;
            let residual = x.zip_map(graph.value(nodes.mu_x), |a, m| (a - m) * (a - m))?;
            sum_loss += loss * b;
            sum_sse += residual.sum();
            sum_kl += graph.value(nodes.kl).item() * b;

            let mut grads = graph.backward(nodes.loss)?;
            if !config.gamma_trainable {
                grads.insert(ParamId(lg_index), Tensor::scalar(0.0));
            }
            adam.step_with_lr(&mut model.parameters_mut(), &grads, lr)?;
            step += 1;
        }
        let record = EpochRecord {
            epoch,
            neg_elbo: sum_loss / n as f64,
            recon_mse: sum_sse / (n as f64 * d),
            kl: sum_kl / n as f64,
            log_gamma: model.log_gamma(),
        };
        let finite = [record.neg_elbo, record.recon_mse, record.kl, record.log_gamma]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Diverged { epoch, step, trace });
        }
        trace.records.push(record);
    }
    Ok((model, trace))
}

/// Ancestral sampling `z ~ N(0, I)`, `x ~ N(mu_x(z), gamma I)`; with
/// `means_only` the decoder mean is returned instead of a noisy draw.
pub fn sample_ancestral(model: &VaeModel, n: usize, seed: u64, means_only: bool) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = standard_normal(&mut rng, n, model.kappa());
    decode_maybe_noisy(model, &z, means_only, &mut rng)
}

pub(crate) fn decode_maybe_noisy(
    model: &VaeModel,
    z: &Tensor,
    means_only: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let mean = model.decode(z)?;
    if means_only {
        return Ok(mean);
    }
    let noise = standard_normal(rng, mean.rows(), mean.cols());
    let sd = model.gamma().sqrt();
    mean.zip_map(&noise, |m, e| m + sd * e)
}

/// Optimal full posterior covariance `(I + J^T J / gamma)^{-1}` for a
/// decoder Jacobian `J` (`d x kappa`).
pub fn optimal_posterior_covariance(jacobian: &Tensor, gamma: f64) -> Result<Tensor> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    let (d, kappa) = jacobian.dims2();
    let j = DMatrix::from_row_slice(d, kappa, jacobian.data());
    let a = DMatrix::identity(kappa, kappa) + j.transpose() * &j / gamma;
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::NonFinite("I + J^T J / gamma is not positive definite".into()))?;
    let inv = chol.inverse();
    let inv = (&inv + inv.transpose()) * 0.5;
    let mut data = Vec::with_capacity(kappa * kappa);
    for i in 0..kappa {
        for k in 0..kappa {
            data.push(inv[(i, k)]);
        }
    }
    Tensor::matrix(kappa, kappa, data)
}
