//! Sample-based measurements: kernel MMD, energy distance, latent spectra,
//! posterior variance histograms, the noise-injection probe, and the
//! entangling transform with a binned total-correlation estimate.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{orthogonality_error, singular_values};
use crate::manifolds::{DensitySpec1D, DistanceStats};
use crate::rng::standard_normal;
use crate::special::{gaussian_cdf, inverse_gaussian_cdf};
use crate::tensor::Tensor;
use crate::vae::VaeModel;

/// Rows used for the median-heuristic bandwidth are capped at this many,
/// evenly spaced through the pooled sample.
const MEDIAN_ROWS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Bandwidth {
    #[default]
    MedianHeuristic,
    Fixed(f64),
}

/// Gaussian RBF kernel `exp(-|a - b|^2 / (2 sigma^2))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct KernelSpec {
    pub bandwidth: Bandwidth,
}

impl KernelSpec {
    pub fn median_heuristic() -> Self {
        Self { bandwidth: Bandwidth::MedianHeuristic }
    }

    pub fn fixed(sigma: f64) -> Self {
        Self { bandwidth: Bandwidth::Fixed(sigma) }
    }
}

fn check_pair(x: &Tensor, y: &Tensor, what: &str) -> Result<()> {
    if x.shape().len() != 2 || y.shape().len() != 2 {
        return Err(Error::Shape(format!("{what} needs matrices")));
    }
    if x.cols() != y.cols() {
        return Err(Error::Shape(format!(
            "{what}: sample widths differ ({} vs {})",
            x.cols(),
            y.cols()
        )));
    }
    if x.rows() < 2 || y.rows() < 2 {
        return Err(Error::InvalidArgument(format!("{what} needs at least 2 rows per sample")));
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

fn pooled<'a>(x: &'a Tensor, y: &'a Tensor) -> Vec<&'a [f64]> {
    x.row_iter().chain(y.row_iter()).collect()
}

fn median_distance(rows: &[&[f64]]) -> f64 {
    let stride = rows.len().div_ceil(MEDIAN_ROWS).max(1);
    let sub: Vec<&[f64]> = rows.iter().step_by(stride).copied().collect();
    let mut d = Vec::with_capacity(sub.len() * (sub.len() - 1) / 2);
    for i in 0..sub.len() {
        for j in i + 1..sub.len() {
            d.push(sq_dist(sub[i], sub[j]).sqrt());
        }
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

/// Resolved kernel bandwidth for the pooled sample.
pub fn resolve_bandwidth(x: &Tensor, y: &Tensor, kernel: &KernelSpec) -> Result<f64> {
    check_pair(x, y, "bandwidth")?;
    let sigma = match kernel.bandwidth {
        Bandwidth::Fixed(s) => s,
        Bandwidth::MedianHeuristic => median_distance(&pooled(x, y)),
    };
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!("kernel bandwidth must be positive, got {sigma}")));
    }
    Ok(sigma)
}

/// Pairwise matrix over the pooled rows together with its row sums, reused
/// across permutations.
struct PooledMatrix {
    n: usize,
    values: Vec<f64>,
    row_sums: Vec<f64>,
}

impl PooledMatrix {
    fn build(rows: &[&[f64]], f: impl Fn(f64) -> f64) -> Self {
        let n = rows.len();
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = f(sq_dist(rows[i], rows[j]));
                values[i * n + j] = v;
                values[j * n + i] = v;
            }
        }
        let row_sums = values.chunks(n).map(|r| r.iter().sum()).collect();
        Self { n, values, row_sums }
    }

    /// `(mean over A x A, mean over B x B, mean over A x B)` for the split
    /// where `in_a[i]` marks group A.
    fn block_means(&self, in_a: &[bool]) -> (f64, f64, f64) {
        let n = self.n;
        let na = in_a.iter().filter(|&&a| a).count();
        let nb = n - na;
        let (mut saa, mut sab, mut sbb) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let row = &self.values[i * n..(i + 1) * n];
            let ra: f64 = row.iter().zip(in_a).filter(|(_, &a)| a).map(|(v, _)| v).sum();
            let rb = self.row_sums[i] - ra;
            if in_a[i] {
                saa += ra;
                sab += rb;
            } else {
                sbb += rb;
            }
        }
        let (na, nb) = (na as f64, nb as f64);
        (saa / (na * na), sbb / (nb * nb), sab / (na * nb))
    }
}

/// Biased (V-statistic) squared MMD with an RBF kernel.
pub fn mmd(x: &Tensor, y: &Tensor, kernel: &KernelSpec) -> Result<f64> {
    let sigma = resolve_bandwidth(x, y, kernel)?;
    Ok(mmd_fixed(x, y, sigma))
}

fn mmd_fixed(x: &Tensor, y: &Tensor, sigma: f64) -> f64 {
    let k = |a: &[f64], b: &[f64]| (-sq_dist(a, b) / (2.0 * sigma * sigma)).exp();
    let mean_k = |p: &Tensor, q: &Tensor| {
        let mut s = 0.0;
        for a in p.row_iter() {
            for b in q.row_iter() {
                s += k(a, b);
            }
        }
        s / (p.rows() * q.rows()) as f64
    };
    (mean_k(x, x) + mean_k(y, y) - 2.0 * mean_k(x, y)).max(0.0)
}

/// Energy distance `2 E|X - Y| - E|X - X'| - E|Y - Y'|` from sample means
/// over all pairs.
pub fn energy_distance(x: &Tensor, y: &Tensor) -> Result<f64> {
    check_pair(x, y, "energy_distance")?;
    let mean_d = |p: &Tensor, q: &Tensor| {
        let mut s = 0.0;
        for a in p.row_iter() {
            for b in q.row_iter() {
                s += sq_dist(a, b).sqrt();
            }
        }
        s / (p.rows() * q.rows()) as f64
    };
    Ok(2.0 * mean_d(x, y) - mean_d(x, x) - mean_d(y, y))
}

/// A two-sample statistic with its label-permutation null distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationTest {
    pub statistic: f64,
    pub null_mean: f64,
    pub null_sd: f64,
    pub null_p95: f64,
    pub p_value: f64,
    /// Kernel bandwidth for MMD tests; `None` for energy distance.
    pub bandwidth: Option<f64>,
}

impl PermutationTest {
    pub fn below_p95(&self) -> bool {
        self.statistic < self.null_p95
    }
}

fn permutation_null(
    matrix: &PooledMatrix,
    n_x: usize,
    n_perm: usize,
    rng: &mut ChaCha8Rng,
    stat: impl Fn((f64, f64, f64)) -> f64,
) -> (f64, Vec<f64>) {
    let n = matrix.n;
    let mut labels: Vec<bool> = (0..n).map(|i| i < n_x).collect();
    let observed = stat(matrix.block_means(&labels));
    let mut null = Vec::with_capacity(n_perm);
    for _ in 0..n_perm {
        labels.shuffle(rng);
        null.push(stat(matrix.block_means(&labels)));
    }
    (observed, null)
}

fn summarize(observed: f64, mut null: Vec<f64>, bandwidth: Option<f64>) -> PermutationTest {
    let m = null.len() as f64;
    let mean = null.iter().sum::<f64>() / m;
    let var = null.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
    let exceed = null.iter().filter(|&&v| v >= observed).count();
    null.sort_by(f64::total_cmp);
    let idx = ((0.95 * m).ceil() as usize).clamp(1, null.len()) - 1;
    PermutationTest {
        statistic: observed,
        null_mean: mean,
        null_sd: var.sqrt(),
        null_p95: null[idx],
        p_value: (exceed as f64 + 1.0) / (m + 1.0),
        bandwidth,
    }
}

/// MMD with a permutation null from `n_perm` random relabelings of the pooled
/// sample. The bandwidth is resolved once on the observed split.
pub fn mmd_permutation_test(
    x: &Tensor,
    y: &Tensor,
    kernel: &KernelSpec,
    n_perm: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PermutationTest> {
    if n_perm == 0 {
        return Err(Error::InvalidArgument("need at least one permutation".into()));
    }
    let sigma = resolve_bandwidth(x, y, kernel)?;
    let rows = pooled(x, y);
    let matrix = PooledMatrix::build(&rows, |d2| (-d2 / (2.0 * sigma * sigma)).exp());
    let (observed, null) =
        permutation_null(&matrix, x.rows(), n_perm, rng, |(kxx, kyy, kxy)| (kxx + kyy - 2.0 * kxy).max(0.0));
    Ok(summarize(observed, null, Some(sigma)))
}

pub fn energy_permutation_test(
    x: &Tensor,
    y: &Tensor,
    n_perm: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PermutationTest> {
    check_pair(x, y, "energy_distance")?;
    if n_perm == 0 {
        return Err(Error::InvalidArgument("need at least one permutation".into()));
    }
    let rows = pooled(x, y);
    let matrix = PooledMatrix::build(&rows, f64::sqrt);
    let (observed, null) =
        permutation_null(&matrix, x.rows(), n_perm, rng, |(dxx, dyy, dxy)| 2.0 * dxy - dxx - dyy);
    Ok(summarize(observed, null, None))
}

/// Singular values of `Z / sqrt(n)`, largest first.
pub fn singular_spectrum(z: &Tensor) -> Result<Vec<f64>> {
    let (n, k) = z.dims2();
    if n < k {
        return Err(Error::InvalidArgument(format!("need n >= kappa, got {n} < {k}")));
    }
    let scaled = z.map(|v| v / (n as f64).sqrt());
    Ok(singular_values(&scaled))
}

/// Largest absolute deviation between two spectra of equal length.
pub fn spectrum_deviation(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max)
}

pub const HISTOGRAM_BINS: usize = 24;
pub const HISTOGRAM_MAX: f64 = 1.2;
pub const ACTIVE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSpectrum {
    /// Batch-averaged encoder variance per latent coordinate.
    pub mean_variances: Vec<f64>,
    /// Counts over `[0, 1.2]` in 24 equal bins; larger values land in the last bin.
    pub histogram: Vec<usize>,
    pub active_dim_estimate: usize,
}

pub fn posterior_eig_histogram(model: &VaeModel, data: &Tensor) -> Result<PosteriorSpectrum> {
    let (_, logvar) = model.encode(data)?;
    let n = logvar.rows() as f64;
    let mut mean_variances = vec![0.0; model.kappa()];
    for row in logvar.row_iter() {
        for (m, lv) in mean_variances.iter_mut().zip(row) {
            *m += lv.exp();
        }
    }
    mean_variances.iter_mut().for_each(|m| *m /= n);
    let mut histogram = vec![0; HISTOGRAM_BINS];
    for &v in &mean_variances {
        let bin = ((v / HISTOGRAM_MAX * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        histogram[bin] += 1;
    }
    let active_dim_estimate = mean_variances.iter().filter(|&&v| v < ACTIVE_THRESHOLD).count();
    Ok(PosteriorSpectrum { mean_variances, histogram, active_dim_estimate })
}

/// Latent coordinates sorted by ascending batch-mean posterior variance.
pub fn directions_by_variance(model: &VaeModel, x: &Tensor) -> Result<Vec<usize>> {
    let spec = posterior_eig_histogram(model, x)?;
    let mut order: Vec<usize> = (0..model.kappa()).collect();
    order.sort_by(|&a, &b| spec.mean_variances[a].total_cmp(&spec.mean_variances[b]));
    Ok(order)
}

/// Mean squared change of the decoded mean when `mu_z(x)` is perturbed by
/// `scale * N(0, 1)` along the `direction_index`-th coordinate in ascending
/// posterior-variance order, averaged over rows, output coordinates and draws.
pub fn noise_injection_probe(
    model: &VaeModel,
    x: &Tensor,
    direction_index: usize,
    scale: f64,
    n_draws: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if direction_index >= model.kappa() {
        return Err(Error::InvalidArgument(format!(
            "direction {direction_index} out of range for kappa {}",
            model.kappa()
        )));
    }
    if n_draws == 0 {
        return Err(Error::InvalidArgument("need at least one draw".into()));
    }
    let coord = directions_by_variance(model, x)?[direction_index];
    let (mu, _) = model.encode(x)?;
    let base = model.decode(&mu)?;
    let mut acc = 0.0;
    for _ in 0..n_draws {
        let noise = standard_normal(rng, mu.rows(), 1);
        let mut z = mu.clone();
        for (i, e) in noise.data().iter().enumerate() {
            z.row_mut(i)[coord] += scale * e;
        }
        let out = model.decode(&z)?;
        acc += out.zip_map(&base, |a, b| (a - b) * (a - b))?.mean();
    }
    Ok(acc / n_draws as f64)
}

fn clamp_level(u: f64) -> f64 {
    u.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn check_entangle_args(z: &Tensor, rotation: &Tensor, a: &[DensitySpec1D], b: &[DensitySpec1D]) -> Result<usize> {
    let (_, k) = z.dims2();
    if rotation.shape() != [k, k] {
        return Err(Error::Shape(format!("rotation must be {k}x{k}, got {:?}", rotation.shape())));
    }
    if a.len() != k || b.len() != k {
        return Err(Error::Shape(format!("need {k} marginals per side, got {} and {}", a.len(), b.len())));
    }
    let err = orthogonality_error(rotation);
    if !(err <= 1e-10) {
        return Err(Error::InvalidArgument(format!("rotation is not orthogonal (|R^T R - I| = {err:e})")));
    }
    Ok(k)
}

fn rotate_rows(z: &Tensor, r: &Tensor, transpose: bool) -> Tensor {
    let rt = if transpose { r.clone() } else { r.transpose() };
    z.matmul(&rt).expect("checked shapes")
}

fn marginal_map(
    z: &Tensor,
    marginals: &[DensitySpec1D],
    f: impl Fn(&DensitySpec1D, f64) -> Result<f64>,
) -> Result<Tensor> {
    let k = marginals.len();
    let mut out = z.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = f(&marginals[i % k], *v)?;
    }
    Ok(out)
}

fn gaussianize(z: &Tensor, marginals: &[DensitySpec1D]) -> Result<Tensor> {
    marginal_map(z, marginals, |d, v| {
        let u = d.cdf(v.clamp(d.lower(), d.upper()))?;
        inverse_gaussian_cdf(clamp_level(u))
    })
}

fn degaussianize(g: &Tensor, marginals: &[DensitySpec1D]) -> Result<Tensor> {
    marginal_map(g, marginals, |d, v| d.inverse_cdf(gaussian_cdf(v)))
}

/// `z~ = D2[R D1(z)]`: Gaussianize each coordinate through its marginal CDF,
/// rotate, then map each coordinate onto the target marginal.
pub fn entangle_transform(
    z: &Tensor,
    source_marginals: &[DensitySpec1D],
    rotation: &Tensor,
    target_marginals: &[DensitySpec1D],
) -> Result<Tensor> {
    check_entangle_args(z, rotation, source_marginals, target_marginals)?;
    let g = gaussianize(z, source_marginals)?;
    let rotated = rotate_rows(&g, rotation, false);
    degaussianize(&rotated, target_marginals)
}

/// Inverse of [`entangle_transform`]: `D1^-1(R^T D2^-1(z~))`.
pub fn disentangle_transform(
    z_tilde: &Tensor,
    source_marginals: &[DensitySpec1D],
    rotation: &Tensor,
    target_marginals: &[DensitySpec1D],
) -> Result<Tensor> {
    check_entangle_args(z_tilde, rotation, source_marginals, target_marginals)?;
    let g = gaussianize(z_tilde, target_marginals)?;
    let rotated = rotate_rows(&g, rotation, true);
    degaussianize(&rotated, source_marginals)
}

pub const MAX_TC_DIMS: usize = 4;
pub const MIN_TC_ROWS: usize = 1000;

/// Plug-in `sum_j H(z_j) - H(z)` in nats from histograms with `bins` equal
/// cells per coordinate spanning the sample range.
pub fn total_correlation_estimate(samples: &Tensor, bins: usize) -> Result<f64> {
    let (n, k) = samples.dims2();
    if k > MAX_TC_DIMS {
        return Err(Error::InvalidArgument(format!(
            "binned total correlation supports at most {MAX_TC_DIMS} dimensions, got {k}"
        )));
    }
    if n < MIN_TC_ROWS {
        return Err(Error::InvalidArgument(format!("need at least {MIN_TC_ROWS} rows, got {n}")));
    }
    if bins < 2 {
        return Err(Error::InvalidArgument("need at least 2 bins".into()));
    }
    let mut lo = vec![f64::INFINITY; k];
    let mut hi = vec![f64::NEG_INFINITY; k];
    for row in samples.row_iter() {
        for j in 0..k {
            lo[j] = lo[j].min(row[j]);
            hi[j] = hi[j].max(row[j]);
        }
    }
    let cell = |j: usize, v: f64| -> usize {
        let w = hi[j] - lo[j];
        if w <= 0.0 {
            return 0;
        }
        (((v - lo[j]) / w * bins as f64) as usize).min(bins - 1)
    };
    let mut marginal = vec![vec![0usize; bins]; k];
    let mut joint: HashMap<Vec<usize>, usize> = HashMap::new();
    for row in samples.row_iter() {
        let key: Vec<usize> = (0..k).map(|j| cell(j, row[j])).collect();
        for j in 0..k {
            marginal[j][key[j]] += 1;
        }
        *joint.entry(key).or_insert(0) += 1;
    }
    let entropy = |counts: &mut dyn Iterator<Item = usize>| -> f64 {
        counts
            .filter(|&c| c > 0)
            .map(|c| {
                let p = c as f64 / n as f64;
                -p * p.ln()
            })
            .sum()
    };
    let h_marg: f64 = marginal.iter().map(|m| entropy(&mut m.iter().copied())).sum();
    let h_joint = entropy(&mut joint.values().copied());
    Ok(h_marg - h_joint)
}

/// Sample distance correlation between two scalar sequences.
pub fn distance_correlation(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Shape("distance correlation needs two equal-length sequences".into()));
    }
    let n = a.len();
    let centered = |v: &[f64]| {
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                d[i * n + j] = (v[i] - v[j]).abs();
            }
        }
        let row: Vec<f64> = (0..n).map(|i| d[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect();
        let total = row.iter().sum::<f64>() / n as f64;
        for i in 0..n {
            for j in 0..n {
                d[i * n + j] += total - row[i] - row[j];
            }
        }
        d
    };
    let (da, db) = (centered(a), centered(b));
    let dot = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).sum::<f64>() / (n * n) as f64;
    let (vab, vaa, vbb) = (dot(&da, &db), dot(&da, &da), dot(&db, &db));
    if vaa <= 0.0 || vbb <= 0.0 {
        return Ok(0.0);
    }
    Ok((vab.max(0.0) / (vaa * vbb).sqrt()).sqrt())
}

/// Everything measured on a finished pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub stage1_trained: bool,
    pub stage2_trained: bool,
    pub stage2_failure: Option<String>,
    pub kappa: usize,
    pub ambient_dim: usize,
    pub mmd_stage1: f64,
    pub mmd_stage1_null_p95: f64,
    pub mmd_stage2: Option<f64>,
    pub mmd_stage2_null_p95: Option<f64>,
    pub kernel_bandwidth_stage1: f64,
    pub kernel_bandwidth_stage2: Option<f64>,
    pub singular_spectrum_stage1: Vec<f64>,
    pub singular_spectrum_stage2: Option<Vec<f64>>,
    pub singular_spectrum_gaussian_reference: Vec<f64>,
    pub posterior_mean_variances: Vec<f64>,
    pub posterior_eig_histogram: Vec<usize>,
    pub active_dim_estimate: usize,
    pub recon_mse: f64,
    pub log_gamma_final: f64,
    pub log_gamma_final_stage2: Option<f64>,
    pub distance_to_manifold_1stage: Option<DistanceStats>,
    pub distance_to_manifold_2stage: Option<DistanceStats>,
    pub sample_energy_distance_1stage: Option<f64>,
    pub sample_energy_distance_2stage: Option<f64>,
}

/// Top-level keys of a serialized [`DiagnosticsReport`].
pub const REPORT_FIELDS: [&str; 24] = [
    "stage1_trained",
    "stage2_trained",
    "stage2_failure",
    "kappa",
    "ambient_dim",
    "mmd_stage1",
    "mmd_stage1_null_p95",
    "mmd_stage2",
    "mmd_stage2_null_p95",
    "kernel_bandwidth_stage1",
    "kernel_bandwidth_stage2",
    "singular_spectrum_stage1",
    "singular_spectrum_stage2",
    "singular_spectrum_gaussian_reference",
    "posterior_mean_variances",
    "posterior_eig_histogram",
    "active_dim_estimate",
    "recon_mse",
    "log_gamma_final",
    "log_gamma_final_stage2",
    "distance_to_manifold_1stage",
    "distance_to_manifold_2stage",
    "sample_energy_distance_1stage",
    "sample_energy_distance_2stage",
];

impl DiagnosticsReport {
    /// True when every present scalar and spectrum entry is finite.
    pub fn all_finite(&self) -> bool {
        let mut v = vec![self.mmd_stage1, self.mmd_stage1_null_p95, self.kernel_bandwidth_stage1];
        v.extend([self.recon_mse, self.log_gamma_final]);
        v.extend(self.mmd_stage2);
        v.extend(self.mmd_stage2_null_p95);
        v.extend(self.kernel_bandwidth_stage2);
        v.extend(self.log_gamma_final_stage2);
        v.extend(self.sample_energy_distance_1stage);
        v.extend(self.sample_energy_distance_2stage);
        v.extend(&self.singular_spectrum_stage1);
        v.extend(self.singular_spectrum_stage2.iter().flatten());
        v.extend(&self.singular_spectrum_gaussian_reference);
        v.extend(&self.posterior_mean_variances);
        for s in [self.distance_to_manifold_1stage, self.distance_to_manifold_2stage].iter().flatten() {
            v.extend([s.mean, s.mean_sq, s.p95]);
        }
        v.iter().all(|x| x.is_finite())
    }
}
