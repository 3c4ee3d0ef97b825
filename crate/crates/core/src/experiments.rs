//! Experiment drivers behind the command-line tool. Each command reads one
//! JSON config, writes its artifacts into one output directory, and is a pure
//! function of the config.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::diagnostics::{
    mmd_permutation_test, posterior_eig_histogram, singular_spectrum, KernelSpec, PosteriorSpectrum,
};
use crate::error::{Error, Result};
use crate::manifolds::{
    density_by_name, make_manifold_dataset, theorem1_density_mass, theorem1_posterior_kl,
    theorem1_pushforward_ks, theorem1_tv, ManifoldSpec,
};
use crate::pipeline::{run_pipeline, PipelineConfig, PipelineRun, SampleOptions};
use crate::rng::{derive_seed, standard_normal, substream};
use crate::special::gaussian_cdf;
use crate::vae::{TrainConfig, TrainTrace, VaeModel};

pub const REPORT_FILE: &str = "report.json";
pub const TRACES_FILE: &str = "traces.csv";
pub const STAGE1_CKPT: &str = "stage1.ckpt";
pub const STAGE2_CKPT: &str = "stage2.ckpt";
pub const ORACLE_FILE: &str = "oracle_report.json";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const DIAGNOSE_FILE: &str = "diagnose.json";

/// Parses a config document, mapping unknown or malformed fields to
/// [`Error::Config`].
pub fn parse_config<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| {
        let msg = e.to_string();
        let field = msg
            .split('`')
            .nth(1)
            .filter(|_| msg.contains("field"))
            .unwrap_or("<document>")
            .to_string();
        Error::Config { field, message: msg }
    })
}

pub fn load_config<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

fn prepare_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| Error::config("--out", format!("cannot create {}: {e}", dir.display())))?;
    let probe = dir.join(".write-probe");
    fs::write(&probe, b"")
        .and_then(|_| fs::remove_file(&probe))
        .map_err(|e| Error::config("--out", format!("{} is not writable: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: PathBuf, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Configuration of a single two-stage run on a named manifold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Preset name; required.
    pub manifold: Option<String>,
    /// Optional consistency checks against the preset.
    pub ambient_dim: Option<usize>,
    pub intrinsic_dim: Option<usize>,
    pub n_train: usize,
    /// Held-out ground truth for sample-quality scores.
    pub n_heldout: usize,
    pub kappa: usize,
    pub hidden_stage1: Vec<usize>,
    pub hidden_stage2: Vec<usize>,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub seed: u64,
    pub n_eval: usize,
    pub n_permutations: usize,
    pub sampling: SampleOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            manifold: None,
            ambient_dim: None,
            intrinsic_dim: None,
            n_train: 2000,
            n_heldout: 1000,
            kappa: p.kappa,
            hidden_stage1: p.hidden_stage1,
            hidden_stage2: p.hidden_stage2,
            stage1: p.stage1,
            stage2: p.stage2,
            seed: p.seed,
            n_eval: p.n_eval,
            n_permutations: p.n_permutations,
            sampling: p.sampling,
        }
    }
}

impl RunConfig {
    /// Resolves and checks the preset.
    pub fn manifold_spec(&self) -> Result<ManifoldSpec> {
        let name = self
            .manifold
            .as_deref()
            .ok_or_else(|| Error::config("manifold", format!("missing preset name; expected one of {}", crate::manifolds::PRESETS.join(", "))))?;
        let spec = ManifoldSpec::preset(name)?;
        if let Some(d) = self.ambient_dim.filter(|&d| d != spec.ambient_dim()) {
            return Err(Error::config("ambient_dim", format!("{d} does not match preset `{name}` (d = {})", spec.ambient_dim())));
        }
        if let Some(r) = self.intrinsic_dim.filter(|&r| r != spec.intrinsic_dim()) {
            return Err(Error::config("intrinsic_dim", format!("{r} does not match preset `{name}` (r = {})", spec.intrinsic_dim())));
        }
        Ok(spec)
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            kappa: self.kappa,
            hidden_stage1: self.hidden_stage1.clone(),
            hidden_stage2: self.hidden_stage2.clone(),
            stage1: self.stage1,
            stage2: self.stage2,
            seed: self.seed,
            n_eval: self.n_eval,
            n_permutations: self.n_permutations,
            sampling: self.sampling,
        }
    }

    pub fn validate(&self) -> Result<ManifoldSpec> {
        let spec = self.manifold_spec()?;
        if self.n_train == 0 {
            return Err(Error::config("n_train", "must be at least 1"));
        }
        if self.n_train < self.stage1.batch_size {
            return Err(Error::config("n_train", "must be at least stage1.batch_size"));
        }
        if self.n_train < self.stage2.batch_size {
            return Err(Error::config("n_train", "must be at least stage2.batch_size"));
        }
        if self.n_heldout < 2 {
            return Err(Error::config("n_heldout", "must be at least 2"));
        }
        self.pipeline().validate()?;
        Ok(spec)
    }
}

/// Training and held-out sets for a run, each from its own derived stream.
pub fn run_datasets(spec: &ManifoldSpec, config: &RunConfig) -> Result<(crate::Tensor, crate::Tensor)> {
    let train = make_manifold_dataset(spec, config.n_train, derive_seed(config.seed, "data-train"))?;
    let heldout = make_manifold_dataset(spec, config.n_heldout, derive_seed(config.seed, "data-heldout"))?;
    Ok((train, heldout))
}

/// Validates, generates data and runs the pipeline without touching disk.
pub fn run_two_stage(config: &RunConfig) -> Result<PipelineRun> {
    let spec = config.validate()?;
    let (train, heldout) = run_datasets(&spec, config)?;
    run_pipeline(&train, Some(&heldout), Some(&spec), &config.pipeline())
}

pub fn traces_csv(stage1: &TrainTrace, stage2: &TrainTrace) -> String {
    let mut out = String::from("stage,epoch,neg_elbo,recon_mse,kl,log_gamma\n");
    for (stage, trace) in [(1, stage1), (2, stage2)] {
        for r in &trace.records {
            writeln!(out, "{stage},{},{},{},{},{}", r.epoch, r.neg_elbo, r.recon_mse, r.kl, r.log_gamma)
                .expect("writing to a String");
        }
    }
    out
}

/// `two-stage`: writes the report, per-epoch traces and both checkpoints.
///
/// A stage-1 divergence leaves its partial trace in `traces.csv` and returns
/// the error. A stage-2 divergence is recorded in the report and the run
/// still succeeds without `stage2.ckpt`.
pub fn cmd_two_stage(config: &RunConfig, out: &Path) -> Result<PipelineRun> {
    config.validate()?;
    prepare_out_dir(out)?;
    let run = match run_two_stage(config) {
        Ok(run) => run,
        Err(Error::Diverged { epoch, step, trace }) => {
            fs::write(out.join(TRACES_FILE), traces_csv(&trace, &TrainTrace::default()))?;
            return Err(Error::Diverged { epoch, step, trace });
        }
        Err(e) => return Err(e),
    };
    fs::write(out.join(TRACES_FILE), traces_csv(&run.stage1_trace, &run.stage2_trace))?;
    write_json(out.join(REPORT_FILE), &run.report)?;
    checkpoint::save(&run.stage1, out.join(STAGE1_CKPT))?;
    if let Some(s2) = &run.stage2 {
        checkpoint::save(s2, out.join(STAGE2_CKPT))?;
    }
    Ok(run)
}

/// Configuration of the analytic-construction oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// One of `normal-1d`, `uniform-1d`, `mixture-1d`; required.
    pub density: Option<String>,
    pub gammas: Vec<f64>,
    /// Pushforward sample size for the KS statistic.
    pub n_pushforward: usize,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { density: None, gammas: vec![1e-2, 1e-3, 1e-4], n_pushforward: 100_000, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub gamma: f64,
    pub tv: f64,
    pub posterior_kl: f64,
    pub ks: f64,
    /// Integral of the smoothed density over the padded grid.
    pub mass: f64,
    /// Closed forms, present for `normal-1d` only.
    pub tv_closed_form: Option<f64>,
    pub posterior_kl_closed_form: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub density: String,
    pub n_pushforward: usize,
    pub rows: Vec<OracleRow>,
}

/// TV between `N(0, 1)` and `N(0, 1 + gamma)`.
pub fn normal_convolution_tv(gamma: f64) -> f64 {
    let s2 = 1.0 + gamma;
    let x0 = (s2 * s2.ln() / gamma).sqrt();
    2.0 * (gaussian_cdf(x0) - gaussian_cdf(x0 / s2.sqrt()))
}

/// Largest posterior KL of the analytic encoder for a standard normal
/// ground truth, over the quantile grid used by the oracle.
///
/// The decoder is the identity, so the true posterior is
/// `N(x / (1 + gamma), gamma / (1 + gamma))` while the encoder is
/// `N(x, gamma)`.
pub fn normal_posterior_kl(gamma: f64, x: f64) -> f64 {
    let s2 = gamma / (1.0 + gamma);
    let m = x / (1.0 + gamma);
    0.5 * (gamma / s2 + (x - m) * (x - m) / s2 - 1.0 + (s2 / gamma).ln())
}

pub fn run_oracle(config: &OracleConfig) -> Result<OracleReport> {
    let name = config
        .density
        .as_deref()
        .ok_or_else(|| Error::config("density", "missing density name; expected normal-1d, uniform-1d or mixture-1d"))?;
    let density = density_by_name(name)?;
    if config.gammas.is_empty() {
        return Err(Error::config("gammas", "needs at least one value"));
    }
    if let Some(g) = config.gammas.iter().find(|g| !(**g > 0.0 && g.is_finite())) {
        return Err(Error::config("gammas", format!("{g} is not a positive finite number")));
    }
    if config.n_pushforward < 2 {
        return Err(Error::config("n_pushforward", "must be at least 2"));
    }
    let ks = theorem1_pushforward_ks(&density, config.n_pushforward, derive_seed(config.seed, "pushforward"))?;
    let xs = crate::manifolds::theorem1_x_grid(&density);
    let mut rows = Vec::with_capacity(config.gammas.len());
    for &gamma in &config.gammas {
        let normal = name == "normal-1d";
        rows.push(OracleRow {
            gamma,
            tv: theorem1_tv(&density, gamma)?,
            posterior_kl: theorem1_posterior_kl(&density, gamma)?,
            ks,
            mass: theorem1_density_mass(&density, gamma)?,
            tv_closed_form: normal.then(|| normal_convolution_tv(gamma)),
            posterior_kl_closed_form: normal
                .then(|| xs.iter().map(|&x| normal_posterior_kl(gamma, x)).fold(0.0, f64::max)),
        });
    }
    Ok(OracleReport { density: name.into(), n_pushforward: config.n_pushforward, rows })
}

/// `oracle-theorem1`: writes `oracle_report.json`.
pub fn cmd_oracle_theorem1(config: &OracleConfig, out: &Path) -> Result<OracleReport> {
    let report = run_oracle(config)?;
    prepare_out_dir(out)?;
    write_json(out.join(ORACLE_FILE), &report)?;
    Ok(report)
}

/// A two-stage run repeated for each latent width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub kappas: Vec<usize>,
    /// `kappa` inside is ignored.
    pub run: RunConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { kappas: vec![1, 2, 4, 8, 16], run: RunConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kappa: usize,
    pub recon_mse: f64,
    pub active_dim_estimate: usize,
    pub energy_distance_1stage: f64,
    pub energy_distance_2stage: Option<f64>,
    pub log_gamma_final: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("kappa,recon_mse,active_dim_estimate,energy_distance_1stage,energy_distance_2stage,log_gamma_final\n");
    for r in rows {
        let ed2 = r.energy_distance_2stage.map(|v| v.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.kappa, r.recon_mse, r.active_dim_estimate, r.energy_distance_1stage, ed2, r.log_gamma_final
        )
        .expect("writing to a String");
    }
    out
}

pub fn run_kappa_sweep(config: &SweepConfig) -> Result<Vec<SweepRow>> {
    if config.kappas.is_empty() {
        return Err(Error::config("kappas", "needs at least one value"));
    }
    if config.kappas.contains(&0) {
        return Err(Error::config("kappas", "every kappa must be at least 1"));
    }
    config.run.validate().map_err(|e| match e {
        Error::Config { field, message } => Error::Config { field: format!("run.{field}"), message },
        other => other,
    })?;
    let mut rows = Vec::with_capacity(config.kappas.len());
    for &kappa in &config.kappas {
        let run = run_two_stage(&RunConfig { kappa, ..config.run.clone() })?;
        let r = &run.report;
        rows.push(SweepRow {
            kappa,
            recon_mse: r.recon_mse,
            active_dim_estimate: r.active_dim_estimate,
            energy_distance_1stage: r.sample_energy_distance_1stage.unwrap_or(f64::NAN),
            energy_distance_2stage: r.sample_energy_distance_2stage,
            log_gamma_final: r.log_gamma_final,
        });
    }
    Ok(rows)
}

/// `kappa-sweep`: writes `sweep.csv`.
pub fn cmd_kappa_sweep(config: &SweepConfig, out: &Path) -> Result<Vec<SweepRow>> {
    prepare_out_dir(out)?;
    let rows = run_kappa_sweep(config)?;
    fs::write(out.join(SWEEP_FILE), sweep_csv(&rows))?;
    Ok(rows)
}

/// Evaluation data for `diagnose`; without a manifold only the model
/// summary is reported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnoseConfig {
    pub manifold: Option<String>,
    pub n: usize,
    pub seed: u64,
    pub n_permutations: usize,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self { manifold: None, n: 1000, seed: 0, n_permutations: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub kappa: usize,
    pub ambient_dim: usize,
    pub log_gamma: f64,
    pub parameter_count: usize,
    pub manifold: Option<String>,
    pub recon_mse: Option<f64>,
    pub posterior_mean_variances: Option<Vec<f64>>,
    pub posterior_eig_histogram: Option<Vec<usize>>,
    pub active_dim_estimate: Option<usize>,
    pub mmd_latent: Option<f64>,
    pub mmd_latent_null_p95: Option<f64>,
    pub singular_spectrum: Option<Vec<f64>>,
}

pub fn diagnose(model: &VaeModel, config: &DiagnoseConfig) -> Result<DiagnoseReport> {
    let mut report = DiagnoseReport {
        kappa: model.kappa(),
        ambient_dim: model.ambient_dim(),
        log_gamma: model.log_gamma(),
        parameter_count: model.parameters().iter().map(|t| t.numel()).sum(),
        manifold: config.manifold.clone(),
        recon_mse: None,
        posterior_mean_variances: None,
        posterior_eig_histogram: None,
        active_dim_estimate: None,
        mmd_latent: None,
        mmd_latent_null_p95: None,
        singular_spectrum: None,
    };
    let Some(name) = &config.manifold else { return Ok(report) };
    let spec = ManifoldSpec::preset(name)?;
    if spec.ambient_dim() != model.ambient_dim() {
        return Err(Error::config(
            "manifold",
            format!("preset `{name}` has d = {} but the model expects {}", spec.ambient_dim(), model.ambient_dim()),
        ));
    }
    if config.n < 2 {
        return Err(Error::config("n", "must be at least 2"));
    }
    if config.n_permutations == 0 {
        return Err(Error::config("n_permutations", "must be at least 1"));
    }
    let data = make_manifold_dataset(&spec, config.n, derive_seed(config.seed, "data-diagnose"))?;
    let recon = model.reconstruct(&data)?;
    report.recon_mse = Some(recon.zip_map(&data, |a, b| (a - b) * (a - b))?.mean());
    let PosteriorSpectrum { mean_variances, histogram, active_dim_estimate } = posterior_eig_histogram(model, &data)?;
    report.posterior_mean_variances = Some(mean_variances);
    report.posterior_eig_histogram = Some(histogram);
    report.active_dim_estimate = Some(active_dim_estimate);
    let z = crate::pipeline::extract_latents(model, &data, derive_seed(config.seed, crate::rng::LATENT_EXTRACT))?.z;
    let mut eval = substream(config.seed, crate::rng::EVAL);
    let reference = standard_normal(&mut eval, z.rows(), z.cols());
    let t = mmd_permutation_test(&z, &reference, &KernelSpec::median_heuristic(), config.n_permutations, &mut eval)?;
    report.mmd_latent = Some(t.statistic);
    report.mmd_latent_null_p95 = Some(t.null_p95);
    report.singular_spectrum = Some(singular_spectrum(&z)?);
    Ok(report)
}

/// `diagnose <checkpoint>`: writes `diagnose.json`.
pub fn cmd_diagnose(checkpoint_path: &Path, config: &DiagnoseConfig, out: &Path) -> Result<DiagnoseReport> {
    let model = checkpoint::load(checkpoint_path)?;
    let report = diagnose(&model, config)?;
    prepare_out_dir(out)?;
    write_json(out.join(DIAGNOSE_FILE), &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_manifold_names_the_field() {
        let cfg: RunConfig = parse_config("{}").unwrap();
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "manifold"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_field_is_a_config_error() {
        match parse_config::<RunConfig>(r#"{"manifold": "circle-arc", "kapa": 3}"#) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "kapa"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn preset_dimension_mismatch_rejected() {
        let cfg = RunConfig { manifold: Some("circle-arc".into()), ambient_dim: Some(3), ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "ambient_dim"));
    }

    #[test]
    fn normal_tv_closed_form_small_gamma() {
        // For small gamma, TV ~ gamma / (sqrt(2 pi e)).
        let g = 1e-6;
        let approx = g / (2.0 * std::f64::consts::PI * std::f64::consts::E).sqrt();
        assert!((normal_convolution_tv(g) - approx).abs() < 1e-3 * approx);
    }

    #[test]
    fn normal_posterior_kl_at_zero() {
        let g: f64 = 0.01;
        let expect = 0.5 * (g - (1.0 + g).ln());
        assert!((normal_posterior_kl(g, 0.0) - expect).abs() < 1e-15);
    }

    #[test]
    fn traces_header_and_rows() {
        let t = TrainTrace {
            records: vec![crate::vae::EpochRecord { epoch: 0, neg_elbo: 1.5, recon_mse: 0.25, kl: 0.5, log_gamma: -1.0 }],
        };
        let csv = traces_csv(&t, &TrainTrace::default());
        assert_eq!(csv, "stage,epoch,neg_elbo,recon_mse,kl,log_gamma\n1,0,1.5,0.25,0.5,-1\n");
    }
}
