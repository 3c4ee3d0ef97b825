//! Two-stage training and extended ancestral sampling `u -> z -> x`.
//!
//! Stage 1 is fitted to the data. Each training row is then encoded once
//! with a single reparameterized draw, and stage 2 is fitted to that frozen
//! latent batch. The stages are never trained jointly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    energy_distance, mmd_permutation_test, posterior_eig_histogram, singular_spectrum, DiagnosticsReport,
    KernelSpec,
};
use crate::error::{Error, Result};
use crate::manifolds::ManifoldSpec;
use crate::rng::{self, derive_seed, standard_normal, substream};
use crate::tensor::Tensor;
use crate::vae::{decode_maybe_noisy, train, TrainConfig, TrainTrace, VaeModel};

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageModel {
    stage1: VaeModel,
    stage2: VaeModel,
}

impl TwoStageModel {
    pub fn new(stage1: VaeModel, stage2: VaeModel) -> Result<Self> {
        let k = stage1.kappa();
        if stage2.ambient_dim() != k || stage2.kappa() != k {
            return Err(Error::Shape(format!(
                "stage 2 must map {k} <-> {k}, got ambient {} and latent {}",
                stage2.ambient_dim(),
                stage2.kappa()
            )));
        }
        Ok(Self { stage1, stage2 })
    }

    pub fn stage1(&self) -> &VaeModel {
        &self.stage1
    }

    pub fn stage2(&self) -> &VaeModel {
        &self.stage2
    }
}

/// One stochastic encoding per training row.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBatch {
    pub z: Tensor,
    pub seed: u64,
}

/// `z_i = mu_z(x_i) + sigma_z(x_i) * eps_i` with `eps` drawn from `seed`.
pub fn extract_latents(stage1: &VaeModel, data: &Tensor, seed: u64) -> Result<LatentBatch> {
    let (mu, logvar) = stage1.encode(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = standard_normal(&mut rng, mu.rows(), mu.cols());
    let mut z = mu;
    for ((zi, lv), e) in z.data_mut().iter_mut().zip(logvar.data()).zip(eps.data()) {
        *zi += (0.5 * lv).exp() * e;
    }
    Ok(LatentBatch { z, seed })
}

/// Fits a fresh `kappa <-> kappa` model, initialized from `init_seed`, to the
/// latent rows.
pub fn train_second_stage(
    latents: &LatentBatch,
    hidden: &[usize],
    init_seed: u64,
    config: &TrainConfig,
) -> Result<(VaeModel, TrainTrace)> {
    let k = latents.z.cols();
    let model = VaeModel::new(k, k, hidden, init_seed)?;
    train(model, &latents.z, config)
}

/// Which stages add their decoder noise during sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleOptions {
    pub noisy_z: bool,
    pub noisy_x: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self { noisy_z: true, noisy_x: false }
    }
}

/// `u ~ N(0, I)`, `z ~ p(z | u)`, `x ~ p(x | z)`.
///
/// Draw order matches [`crate::vae::sample_ancestral`]: the first stream
/// draws are the top-level latents, so replacing stage 2 by an identity
/// decoder in mean mode reproduces single-stage sampling exactly.
pub fn two_stage_sample(model: &TwoStageModel, n: usize, seed: u64, opts: SampleOptions) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = standard_normal(&mut rng, n, model.stage2.kappa());
    let z = decode_maybe_noisy(&model.stage2, &u, !opts.noisy_z, &mut rng)?;
    decode_maybe_noisy(&model.stage1, &z, !opts.noisy_x, &mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub kappa: usize,
    pub hidden_stage1: Vec<usize>,
    pub hidden_stage2: Vec<usize>,
    /// Seed fields are ignored; every stream derives from `seed`.
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub seed: u64,
    /// Latent rows entering the MMD tests and the number of generated samples.
    pub n_eval: usize,
    pub n_permutations: usize,
    pub sampling: SampleOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            kappa: 8,
            hidden_stage1: vec![64, 64],
            hidden_stage2: vec![64, 64, 64],
            stage1: desk_train_config(None),
            stage2: desk_train_config(Some(STAGE2_INITIAL_LOG_GAMMA)),
            seed: 0,
            n_eval: 2000,
            n_permutations: 200,
            sampling: SampleOptions::default(),
        }
    }
}

/// Starting `log gamma` of the second stage. From `gamma = 1` the second
/// stage settles into the collapsed fit `p(z) = N(0, I)`, which matches the
/// near-Gaussian aggregated posterior to first order.
pub const STAGE2_INITIAL_LOG_GAMMA: f64 = -3.0;

/// 600 epochs at `lr = 1e-3`, halved once at the midpoint.
pub fn desk_train_config(initial_log_gamma: Option<f64>) -> TrainConfig {
    TrainConfig { epochs: 600, base_lr: 1e-3, lr_half_every: 300, initial_log_gamma, ..TrainConfig::default() }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kappa == 0 {
            return Err(Error::config("kappa", "must be at least 1"));
        }
        if self.hidden_stage1.contains(&0) {
            return Err(Error::config("hidden_stage1", "widths must be positive"));
        }
        if self.hidden_stage2.contains(&0) {
            return Err(Error::config("hidden_stage2", "widths must be positive"));
        }
        if self.n_eval < 2 {
            return Err(Error::config("n_eval", "must be at least 2"));
        }
        if self.n_permutations == 0 {
            return Err(Error::config("n_permutations", "must be at least 1"));
        }
        self.stage1.validate().map_err(|e| prefix("stage1", e))?;
        self.stage2.validate().map_err(|e| prefix("stage2", e))
    }
}

fn prefix(stage: &str, e: Error) -> Error {
    match e {
        Error::Config { field, message } => Error::Config { field: format!("{stage}.{field}"), message },
        other => other,
    }
}

/// Everything produced by [`run_pipeline`]. Stage-2 fields are `None` when
/// stage-2 training failed; the report then carries the failure message.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub stage1: VaeModel,
    pub stage1_trace: TrainTrace,
    pub latents: LatentBatch,
    pub stage2: Option<VaeModel>,
    pub stage2_trace: TrainTrace,
    pub report: DiagnosticsReport,
}

impl PipelineRun {
    pub fn two_stage_model(&self) -> Option<TwoStageModel> {
        let s2 = self.stage2.clone()?;
        TwoStageModel::new(self.stage1.clone(), s2).ok()
    }
}

/// Trains both stages and measures the result.
///
/// `heldout` is ground truth used only for sample-quality scores; `manifold`
/// enables distance-to-manifold statistics. A stage-1 divergence is returned
/// as an error; a stage-2 divergence is recorded in the report.
pub fn run_pipeline(
    data: &Tensor,
    heldout: Option<&Tensor>,
    manifold: Option<&ManifoldSpec>,
    config: &PipelineConfig,
) -> Result<PipelineRun> {
    config.validate()?;
    if data.shape().len() != 2 {
        return Err(Error::Shape("training data must be a matrix".into()));
    }
    let d = data.cols();
    let master = config.seed;

    let stage1 = VaeModel::new(d, config.kappa, &config.hidden_stage1, derive_seed(master, rng::STAGE1_INIT))?;
    let cfg1 = TrainConfig { seed: derive_seed(master, rng::STAGE1_NOISE), ..config.stage1 };
    let (stage1, stage1_trace) = train(stage1, data, &cfg1)?;

    let latents = extract_latents(&stage1, data, derive_seed(master, rng::LATENT_EXTRACT))?;
    let cfg2 = TrainConfig { seed: derive_seed(master, rng::STAGE2_NOISE), ..config.stage2 };
    let init2 = derive_seed(master, rng::STAGE2_INIT);
    let (stage2, stage2_trace, failure) =
        match train_second_stage(&latents, &config.hidden_stage2, init2, &cfg2) {
            Ok((m, t)) => (Some(m), t, None),
            Err(Error::Diverged { trace, epoch, step }) => {
                (None, trace, Some(format!("stage 2 diverged at epoch {epoch}, step {step}")))
            }
            Err(e) => return Err(e),
        };

    let mut run = PipelineRun {
        stage1,
        stage1_trace,
        latents,
        stage2,
        stage2_trace,
        report: empty_report(config.kappa, d),
    };
    run.report = measure(&run, data, heldout, manifold, config, failure)?;
    Ok(run)
}

fn empty_report(kappa: usize, d: usize) -> DiagnosticsReport {
    DiagnosticsReport {
        stage1_trained: false,
        stage2_trained: false,
        stage2_failure: None,
        kappa,
        ambient_dim: d,
        mmd_stage1: 0.0,
        mmd_stage1_null_p95: 0.0,
        mmd_stage2: None,
        mmd_stage2_null_p95: None,
        kernel_bandwidth_stage1: 0.0,
        kernel_bandwidth_stage2: None,
        singular_spectrum_stage1: vec![],
        singular_spectrum_stage2: None,
        singular_spectrum_gaussian_reference: vec![],
        posterior_mean_variances: vec![],
        posterior_eig_histogram: vec![],
        active_dim_estimate: 0,
        recon_mse: 0.0,
        log_gamma_final: 0.0,
        log_gamma_final_stage2: None,
        distance_to_manifold_1stage: None,
        distance_to_manifold_2stage: None,
        sample_energy_distance_1stage: None,
        sample_energy_distance_2stage: None,
    }
}

fn head_rows(t: &Tensor, n: usize) -> Tensor {
    let idx: Vec<usize> = (0..n.min(t.rows())).collect();
    t.select_rows(&idx)
}

fn measure(
    run: &PipelineRun,
    data: &Tensor,
    heldout: Option<&Tensor>,
    manifold: Option<&ManifoldSpec>,
    config: &PipelineConfig,
    stage2_failure: Option<String>,
) -> Result<DiagnosticsReport> {
    let mut eval = substream(config.seed, rng::EVAL);
    let n_eval = config.n_eval;
    let kappa = config.kappa;
    let kernel = KernelSpec::median_heuristic();
    let mut report = empty_report(kappa, data.cols());
    report.stage1_trained = !run.stage1_trace.is_empty();
    report.stage2_trained = run.stage2.is_some() && !run.stage2_trace.is_empty();
    report.stage2_failure = stage2_failure;

    let z = &run.latents.z;
    let z_eval = head_rows(z, n_eval);
    // One reference draw serves both stages so their MMDs differ only
    // through the latents being compared.
    let reference = standard_normal(&mut eval, z_eval.rows(), kappa);
    let t1 = mmd_permutation_test(&z_eval, &reference, &kernel, config.n_permutations, &mut eval)?;
    report.mmd_stage1 = t1.statistic;
    report.mmd_stage1_null_p95 = t1.null_p95;
    report.kernel_bandwidth_stage1 = t1.bandwidth.unwrap_or(0.0);
    report.singular_spectrum_stage1 = singular_spectrum(z)?;
    let gauss = standard_normal(&mut eval, z.rows(), kappa);
    report.singular_spectrum_gaussian_reference = singular_spectrum(&gauss)?;

    let spectrum = posterior_eig_histogram(&run.stage1, data)?;
    report.posterior_mean_variances = spectrum.mean_variances;
    report.posterior_eig_histogram = spectrum.histogram;
    report.active_dim_estimate = spectrum.active_dim_estimate;
    let recon = run.stage1.reconstruct(data)?;
    report.recon_mse = recon.zip_map(data, |a, b| (a - b) * (a - b))?.mean();
    report.log_gamma_final = run.stage1.log_gamma();

    let sample_seed = derive_seed(config.seed, "eval-samples");
    let single = crate::vae::sample_ancestral(&run.stage1, n_eval, sample_seed, !config.sampling.noisy_x)?;
    if let Some(h) = heldout {
        report.sample_energy_distance_1stage = Some(energy_distance(&single, h)?);
    }
    if let Some(m) = manifold {
        report.distance_to_manifold_1stage = Some(m.distance_stats(&single)?);
    }

    if let Some(model) = run.two_stage_model() {
        let s2 = model.stage2();
        let u = extract_latents(s2, &z_eval, derive_seed(config.seed, "stage2-extract"))?;
        let t2 = mmd_permutation_test(&u.z, &reference, &kernel, config.n_permutations, &mut eval)?;
        report.mmd_stage2 = Some(t2.statistic);
        report.mmd_stage2_null_p95 = Some(t2.null_p95);
        report.kernel_bandwidth_stage2 = t2.bandwidth;
        let u_all = extract_latents(s2, z, derive_seed(config.seed, "stage2-extract"))?;
        report.singular_spectrum_stage2 = Some(singular_spectrum(&u_all.z)?);
        report.log_gamma_final_stage2 = Some(s2.log_gamma());

        let double = two_stage_sample(&model, n_eval, sample_seed, config.sampling)?;
        if let Some(h) = heldout {
            report.sample_energy_distance_2stage = Some(energy_distance(&double, h)?);
        }
        if let Some(m) = manifold {
            report.distance_to_manifold_2stage = Some(m.distance_stats(&double)?);
        }
    }
    Ok(report)
}
