//! Ground-truth generative processes with known intrinsic dimension, plus the
//! analytic constructions built from them: quadrature CDFs, the
//! `F^-1 o G` decoder, its Gaussian-smoothed density and the matching
//! encoder posterior.

use std::f64::consts::PI;
use std::fmt;
use std::num::NonZeroUsize;
use std::sync::{Arc, OnceLock};

use gauss_quad::legendre::GaussLegendre;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{standard_normal, substream};
use crate::special::{gaussian_cdf, gaussian_log_pdf, inverse_gaussian_cdf};
use crate::tensor::Tensor;

pub const DEFAULT_GRID: usize = 4096;
const BISECTION_STEPS: usize = 60;

type LogDensity = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
type ConditionalLogDensity = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// A univariate density on `[lower, upper]` with its CDF tabulated on a
/// uniform grid.
///
/// The cumulative integral uses the trapezoid rule with the first
/// Euler-Maclaurin end correction, and values between nodes come from the
/// cubic Hermite interpolant through `(F_i, p_i)`, so both are accurate to
/// `O(h^4)` for smooth densities.
#[derive(Clone)]
pub struct DensitySpec1D {
    log_density: LogDensity,
    lower: f64,
    upper: f64,
    step: f64,
    log_norm: f64,
    pdf: Vec<f64>,
    cdf: Vec<f64>,
}

impl fmt::Debug for DensitySpec1D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DensitySpec1D")
            .field("lower", &self.lower)
            .field("upper", &self.upper)
            .field("grid_size", &self.pdf.len())
            .finish()
    }
}

impl DensitySpec1D {
    /// `log_density` may be unnormalized; it must be finite on `[lower, upper]`.
    pub fn new(
        log_density: impl Fn(f64) -> f64 + Send + Sync + 'static,
        lower: f64,
        upper: f64,
        grid_size: usize,
    ) -> Result<Self> {
        if !(lower < upper) || !lower.is_finite() || !upper.is_finite() {
            return Err(Error::InvalidArgument(format!("bad support [{lower}, {upper}]")));
        }
        if grid_size < 3 {
            return Err(Error::InvalidArgument("grid needs at least 3 points".into()));
        }
        let log_density: LogDensity = Arc::new(log_density);
        let n = grid_size;
        let step = (upper - lower) / (n - 1) as f64;
        let logs: Vec<f64> = (0..n).map(|i| log_density(lower + i as f64 * step)).collect();
        if logs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("log-density must be finite on the support".into()));
        }
        let shift = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let f: Vec<f64> = logs.iter().map(|l| (l - shift).exp()).collect();
        let df = grid_derivative(&f, step);

        let mut c = vec![0.0; n];
        for i in 1..n {
            c[i] = c[i - 1] + 0.5 * step * (f[i - 1] + f[i]);
        }
        for i in 1..n {
            c[i] -= step * step / 12.0 * (df[i] - df[0]);
        }
        let z = c[n - 1];
        for i in 1..n {
            // Keep the tabulated CDF strictly increasing even where the
            // correction term dominates an underflowing density.
            c[i] = c[i].max(c[i - 1] + f64::MIN_POSITIVE);
        }
        let cdf: Vec<f64> = c.iter().map(|v| v / z).collect();
        let pdf: Vec<f64> = f.iter().map(|v| v / z).collect();
        Ok(Self {
            log_density,
            lower,
            upper,
            step,
            log_norm: shift + z.ln(),
            pdf,
            cdf,
        })
    }

    pub fn standard_normal() -> Self {
        Self::new(|x| -0.5 * x * x, -8.0, 8.0, DEFAULT_GRID).expect("valid")
    }

    pub fn uniform(lower: f64, upper: f64) -> Result<Self> {
        Self::new(|_| 0.0, lower, upper, DEFAULT_GRID)
    }

    /// Equal-weight mixture of normals `N(mean_k, variance)`, truncated eight
    /// standard deviations beyond the outer means.
    pub fn gaussian_mixture(means: &[f64], variance: f64) -> Result<Self> {
        if means.is_empty() || !(variance > 0.0) {
            return Err(Error::InvalidArgument("mixture needs means and positive variance".into()));
        }
        let sd = variance.sqrt();
        let lo = means.iter().cloned().fold(f64::INFINITY, f64::min) - 8.0 * sd;
        let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 8.0 * sd;
        let means = means.to_vec();
        Self::new(
            move |x| {
                let terms: Vec<f64> = means.iter().map(|m| -0.5 * (x - m) * (x - m) / variance).collect();
                log_sum_exp(&terms)
            },
            lo,
            hi,
            DEFAULT_GRID,
        )
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn grid_size(&self) -> usize {
        self.pdf.len()
    }

    pub fn grid_step(&self) -> f64 {
        self.step
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lower && x <= self.upper
    }

    /// Normalized density; zero outside the support.
    pub fn pdf(&self, x: f64) -> f64 {
        if !self.contains(x) {
            return 0.0;
        }
        ((self.log_density)(x) - self.log_norm).exp()
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        if !self.contains(x) {
            return f64::NEG_INFINITY;
        }
        (self.log_density)(x) - self.log_norm
    }

    /// `F(x)`; errors outside the support.
    pub fn cdf(&self, x: f64) -> Result<f64> {
        if !self.contains(x) {
            return Err(Error::Domain(format!(
                "x = {x} outside support [{}, {}]",
                self.lower, self.upper
            )));
        }
        Ok(self.cdf_clamped(x))
    }

    fn cdf_clamped(&self, x: f64) -> f64 {
        let n = self.cdf.len();
        let pos = ((x - self.lower) / self.step).clamp(0.0, (n - 1) as f64);
        let i = (pos.floor() as usize).min(n - 2);
        let t = pos - i as f64;
        self.hermite(i, t)
    }

    fn hermite(&self, i: usize, t: f64) -> f64 {
        let (t2, t3) = (t * t, t * t * t);
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        // Written as an increment over `F_i` so rounding cannot reverse the
        // ordering where `F` is within a few ulps of 1.
        let rise = self.cdf[i + 1] - self.cdf[i];
        self.cdf[i] + (h01 * rise + self.step * (h10 * self.pdf[i] + h11 * self.pdf[i + 1]))
    }

    /// `F^-1(u)` for `u` in `[0, 1]`, by bisection on the interpolant.
    pub fn inverse_cdf(&self, u: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&u) {
            return Err(Error::Domain(format!("CDF level must lie in [0, 1], got {u}")));
        }
        let n = self.cdf.len();
        let i = match self.cdf.partition_point(|&c| c <= u) {
            0 => 0,
            k if k >= n => n - 2,
            k => k - 1,
        };
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..BISECTION_STEPS {
            let mid = 0.5 * (lo + hi);
            if self.hermite(i, mid) < u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(self.lower + (i as f64 + 0.5 * (lo + hi)) * self.step)
    }

    /// Median, `F^-1(1/2)`.
    pub fn median(&self) -> f64 {
        self.inverse_cdf(0.5).expect("0.5 is a valid level")
    }
}

fn grid_derivative(f: &[f64], h: f64) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![0.0; n];
    for i in 1..n - 1 {
        d[i] = (f[i + 1] - f[i - 1]) / (2.0 * h);
    }
    d[0] = (-3.0 * f[0] + 4.0 * f[1] - f[2]) / (2.0 * h);
    d[n - 1] = (3.0 * f[n - 1] - 4.0 * f[n - 2] + f[n - 3]) / (2.0 * h);
    d
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// A bivariate density given as `p(x1) p(x2 | x1)`, each factor on a bounded
/// interval.
#[derive(Clone)]
pub struct DensitySpec2D {
    marginal: DensitySpec1D,
    conditional: ConditionalLogDensity,
    lower2: f64,
    upper2: f64,
    grid_size: usize,
}

impl fmt::Debug for DensitySpec2D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DensitySpec2D")
            .field("marginal", &self.marginal)
            .field("lower2", &self.lower2)
            .field("upper2", &self.upper2)
            .finish()
    }
}

impl DensitySpec2D {
    /// `conditional(x1, x2)` is the (unnormalized) log-density of `x2` given `x1`.
    pub fn new(
        marginal: DensitySpec1D,
        conditional: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        lower2: f64,
        upper2: f64,
        grid_size: usize,
    ) -> Result<Self> {
        if !(lower2 < upper2) {
            return Err(Error::InvalidArgument(format!("bad support [{lower2}, {upper2}]")));
        }
        Ok(Self { marginal, conditional: Arc::new(conditional), lower2, upper2, grid_size })
    }

    /// Ring density `exp(-(|x| - radius)^2 / (2 width^2))` on the square
    /// `[-half, half]^2`. The marginal of `x1` is integrated numerically.
    pub fn annulus(radius: f64, width: f64, half: f64, grid_size: usize) -> Result<Self> {
        if !(radius > 0.0 && width > 0.0 && half > 0.0) {
            return Err(Error::InvalidArgument("annulus needs positive radius, width and extent".into()));
        }
        let joint = move |x1: f64, x2: f64| {
            let r = x1.hypot(x2) - radius;
            -0.5 * r * r / (width * width)
        };
        const INNER: usize = 801;
        let h = 2.0 * half / (INNER - 1) as f64;
        let marginal = DensitySpec1D::new(
            move |x1| {
                let logs: Vec<f64> = (0..INNER).map(|j| joint(x1, -half + j as f64 * h)).collect();
                let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = logs
                    .iter()
                    .enumerate()
                    .map(|(j, l)| if j == 0 || j == INNER - 1 { 0.5 } else { 1.0 } * (l - m).exp())
                    .sum();
                m + (s * h).ln()
            },
            -half,
            half,
            grid_size,
        )?;
        Self::new(marginal, joint, -half, half, grid_size)
    }

    pub fn marginal(&self) -> &DensitySpec1D {
        &self.marginal
    }

    /// The conditional factor at a fixed `x1`, tabulated.
    pub fn conditional_at(&self, x1: f64) -> Result<DensitySpec1D> {
        let c = Arc::clone(&self.conditional);
        DensitySpec1D::new(move |x2| c(x1, x2), self.lower2, self.upper2, self.grid_size)
    }

    pub fn cdf(&self, x: [f64; 2]) -> Result<[f64; 2]> {
        let f1 = self.marginal.cdf(x[0])?;
        let f2 = self.conditional_at(x[0])?.cdf(x[1])?;
        Ok([f1, f2])
    }

    pub fn inverse_cdf(&self, u: [f64; 2]) -> Result<[f64; 2]> {
        let x1 = self.marginal.inverse_cdf(u[0])?;
        let x2 = self.conditional_at(x1)?.inverse_cdf(u[1])?;
        Ok([x1, x2])
    }

    pub fn log_pdf(&self, x: [f64; 2]) -> Result<f64> {
        Ok(self.marginal.log_pdf(x[0]) + self.conditional_at(x[0])?.log_pdf(x[1]))
    }
}

/// Latent ground-truth density over `R^r`.
#[derive(Debug, Clone)]
pub enum LatentDensity {
    /// Independent coordinates.
    Product(Vec<DensitySpec1D>),
    /// Autoregressive pair.
    Pair(DensitySpec2D),
}

impl LatentDensity {
    pub fn dim(&self) -> usize {
        match self {
            LatentDensity::Product(v) => v.len(),
            LatentDensity::Pair(_) => 2,
        }
    }

    /// Per-coordinate conditional CDFs `F_i(x_i; x_{1:i-1})`.
    pub fn cdf(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        match self {
            LatentDensity::Product(v) => v.iter().zip(x).map(|(d, &xi)| d.cdf(xi)).collect(),
            LatentDensity::Pair(p) => Ok(p.cdf([x[0], x[1]])?.to_vec()),
        }
    }

    pub fn inverse_cdf(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(u.len())?;
        match self {
            LatentDensity::Product(v) => v.iter().zip(u).map(|(d, &ui)| d.inverse_cdf(ui)).collect(),
            LatentDensity::Pair(p) => Ok(p.inverse_cdf([u[0], u[1]])?.to_vec()),
        }
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim() {
            return Err(Error::Shape(format!("latent has {} coordinates, got {got}", self.dim())));
        }
        Ok(())
    }
}

/// `F(x)` per coordinate.
pub fn conditional_cdf_f(density: &LatentDensity, x: &[f64]) -> Result<Vec<f64>> {
    density.cdf(x)
}

/// The analytic decoder `F^-1 o G`, mapping standard normal `z` onto `p_gt`.
pub fn theorem1_decoder(density: &LatentDensity, z: &[f64]) -> Result<Vec<f64>> {
    let u: Vec<f64> = z.iter().map(|&v| gaussian_cdf(v)).collect();
    density.inverse_cdf(&u)
}

/// The analytic encoder mean `G^-1 o F`.
pub fn theorem1_encoder(density: &LatentDensity, x: &[f64]) -> Result<Vec<f64>> {
    density.cdf(x)?.into_iter().map(inverse_gaussian_cdf).collect()
}

/// `p_theta(x) = integral N(x | x', gamma) p_gt(x') dx'`.
///
/// Integrates over the kernel offset on a grid of 321 points spanning
/// eight kernel standard deviations each side, which is spectrally accurate
/// for smooth `p_gt`.
pub fn theorem1_density(density: &DensitySpec1D, gamma: f64, x: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    Ok(smoothed_density(density, gamma.sqrt(), x))
}

fn smoothed_density(density: &DensitySpec1D, sd: f64, x: f64) -> f64 {
    // Integrate `phi_sd(t) p(x - t)` over `|t| <= 8 sd`, clipped to where
    // `x - t` is inside the support so a jump in `p` never falls inside a panel.
    let t0 = (-8.0 * sd).max(x - density.upper());
    let t1 = (8.0 * sd).min(x - density.lower());
    if t1 <= t0 {
        return 0.0;
    }
    let rule = gauss_legendre();
    let panels = ((t1 - t0) / (2.0 * sd)).ceil().max(1.0) as usize;
    let width = (t1 - t0) / panels as f64;
    let integrand = |t: f64| {
        (-0.5 * (t / sd).powi(2)).exp() * density.pdf((x - t).clamp(density.lower(), density.upper()))
    };
    let acc: f64 = (0..panels)
        .map(|k| rule.integrate(t0 + k as f64 * width, t0 + (k + 1) as f64 * width, integrand))
        .sum();
    acc / (sd * (2.0 * PI).sqrt())
}

/// 32-point rule, exact for the Gaussian kernel to double precision on a
/// panel two standard deviations wide.
fn gauss_legendre() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(NonZeroUsize::new(32).expect("nonzero")))
}

/// Uniform evaluation grid over the support padded by `6 sqrt(gamma)`.
fn padded_grid(density: &DensitySpec1D, gamma: f64) -> (f64, f64, usize) {
    let pad = 6.0 * gamma.sqrt();
    let (a, b) = (density.lower() - pad, density.upper() + pad);
    let n = 4 * density.grid_size() + 1;
    (a, (b - a) / (n - 1) as f64, n)
}

/// Trapezoid integral of `p_theta` over the padded grid.
pub fn theorem1_density_mass(density: &DensitySpec1D, gamma: f64) -> Result<f64> {
    let _ = theorem1_density(density, gamma, density.median())?;
    let (a, h, n) = padded_grid(density, gamma);
    let sd = gamma.sqrt();
    let vals: Vec<f64> = (0..n).map(|i| smoothed_density(density, sd, a + i as f64 * h)).collect();
    Ok(trapezoid(&vals, h))
}

/// `TV(p_theta, p_gt) = 1/2 integral |p_theta - p_gt|` on the padded grid.
pub fn theorem1_tv(density: &DensitySpec1D, gamma: f64) -> Result<f64> {
    let _ = theorem1_density(density, gamma, density.median())?;
    let (a, h, n) = padded_grid(density, gamma);
    let sd = gamma.sqrt();
    let vals: Vec<f64> = (0..n)
        .map(|i| {
            let x = a + i as f64 * h;
            (smoothed_density(density, sd, x) - density.pdf(x)).abs()
        })
        .collect();
    Ok(0.5 * trapezoid(&vals, h))
}

fn trapezoid(v: &[f64], h: f64) -> f64 {
    let n = v.len();
    h * (v.iter().sum::<f64>() - 0.5 * (v[0] + v[n - 1]))
}

/// Grid of `x` values at which [`theorem1_posterior_kl`] is evaluated: the
/// `p_gt` quantiles at levels `0.01, 0.02, ..., 0.99`.
pub fn theorem1_x_grid(density: &DensitySpec1D) -> Vec<f64> {
    (1..100).map(|k| density.inverse_cdf(k as f64 / 100.0).expect("interior level")).collect()
}

/// `KL[q(z|x) || p_theta(z|x)]` at one `x` for the analytic encoder/decoder
/// pair with decoder variance `gamma`.
///
/// `q` is `N(G^-1(F(x)), gamma / f'(z*)^2)` where `f = F^-1 o G` and
/// `f'(z) = phi(z) / p_gt(f(z))`. The exact posterior is proportional to
/// `N(z | 0, 1) N(x | f(z), gamma)` and is normalized by quadrature on the
/// same grid, which spans twelve `q` standard deviations each side.
pub fn theorem1_posterior_kl_at(density: &DensitySpec1D, gamma: f64, x: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    let z_star = inverse_gaussian_cdf(density.cdf(x)?)?;
    let px = density.pdf(x);
    if !(px > 0.0) {
        return Err(Error::Domain(format!("p_gt({x}) is zero")));
    }
    let slope = (gaussian_log_pdf(z_star) - px.ln()).exp();
    let q_var = gamma / (slope * slope);
    let q_sd = q_var.sqrt();

    const HALF: usize = 600;
    let h = 12.0 * q_sd / HALF as f64;
    let mut log_q = Vec::with_capacity(2 * HALF + 1);
    let mut log_p = Vec::with_capacity(2 * HALF + 1);
    for k in 0..=2 * HALF {
        let z = z_star + (k as f64 - HALF as f64) * h;
        let u = gaussian_cdf(z).clamp(0.0, 1.0);
        let fx = density.inverse_cdf(u)?;
        log_q.push(-0.5 * (z - z_star).powi(2) / q_var - 0.5 * (2.0 * PI * q_var).ln());
        log_p.push(gaussian_log_pdf(z) - 0.5 * (x - fx).powi(2) / gamma);
    }
    let weights = |k: usize| if k == 0 || k == 2 * HALF { 0.5 * h } else { h };
    let log_terms: Vec<f64> = log_p.iter().enumerate().map(|(k, lp)| lp + weights(k).ln()).collect();
    let log_z = log_sum_exp(&log_terms);
    let mut kl = 0.0;
    for k in 0..=2 * HALF {
        let q = log_q[k].exp();
        if q > 0.0 {
            kl += weights(k) * q * (log_q[k] - (log_p[k] - log_z));
        }
    }
    Ok(kl.max(0.0))
}

/// Largest posterior KL over [`theorem1_x_grid`].
pub fn theorem1_posterior_kl(density: &DensitySpec1D, gamma: f64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for x in theorem1_x_grid(density) {
        worst = worst.max(theorem1_posterior_kl_at(density, gamma, x)?);
    }
    Ok(worst)
}

/// Kolmogorov-Smirnov distance between the pushforward of `n` standard
/// normal draws through [`theorem1_decoder`] and the analytic CDF.
pub fn theorem1_pushforward_ks(density: &DensitySpec1D, n: usize, seed: u64) -> Result<f64> {
    let mut rng = substream(seed, crate::rng::EVAL);
    let z = standard_normal(&mut rng, n, 1);
    let latent = LatentDensity::Product(vec![density.clone()]);
    let mut xs = Vec::with_capacity(n);
    for &zi in z.data() {
        xs.push(theorem1_decoder(&latent, &[zi])?[0]);
    }
    ks_statistic(&mut xs, |x| density.cdf_clamped(x))
}

/// Sup-distance between the empirical CDF of `xs` and `cdf`. Sorts `xs`.
pub fn ks_statistic(xs: &mut [f64], cdf: impl Fn(f64) -> f64) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::InvalidArgument("KS statistic needs samples".into()));
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    Ok(d)
}

/// Oracle densities addressable by name.
pub fn density_by_name(name: &str) -> Result<DensitySpec1D> {
    match name {
        "normal-1d" => Ok(DensitySpec1D::standard_normal()),
        "uniform-1d" => DensitySpec1D::uniform(0.0, 1.0),
        "mixture-1d" => mixture_1d(),
        other => Err(Error::config(
            "density",
            format!("unknown density `{other}`; expected normal-1d, uniform-1d or mixture-1d"),
        )),
    }
}

/// `1/2 N(-2, 0.25) + 1/2 N(2, 0.25)`.
pub fn mixture_1d() -> Result<DensitySpec1D> {
    DensitySpec1D::gaussian_mixture(&[-2.0, 2.0], 0.25)
}

pub const PRESETS: [&str; 4] = ["circle-arc", "tanh-embed-2-10", "mixture-1d", "swiss-2-3"];

#[derive(Debug, Clone)]
enum Embedding {
    Identity,
    Arc,
    Swiss { scale: f64 },
    TanhLift { q: Tensor, w: Tensor, b: Vec<f64>, s: f64 },
}

/// A ground-truth generative process `x = g(u)`, `u ~ p_gt` on `R^r`.
#[derive(Debug, Clone)]
pub struct ManifoldSpec {
    name: String,
    intrinsic_dim: usize,
    ambient_dim: usize,
    latent: LatentDensity,
    embedding: Embedding,
}

/// Nearest manifold point with its latent coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub point: Vec<f64>,
    pub latent: Vec<f64>,
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DistanceStats {
    pub mean: f64,
    pub mean_sq: f64,
    pub p95: f64,
}

const SWISS_T: (f64, f64) = (1.5 * PI, 4.5 * PI);
const SWISS_H: (f64, f64) = (0.0, 10.0);
const EMBED_SEED: u64 = 0x5eed_2d10;

impl ManifoldSpec {
    /// Named benchmark processes. `tanh-embed-2-10` draws `u` from a thin
    /// ring of radius 1.5 so the latent distribution is far from Gaussian,
    /// then lifts it to `(u, tanh(W u + b))` and applies a fixed rotation of
    /// `R^10`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "circle-arc" => Ok(Self {
                name: name.into(),
                intrinsic_dim: 1,
                ambient_dim: 2,
                latent: LatentDensity::Product(vec![DensitySpec1D::uniform(0.0, 3.0)?]),
                embedding: Embedding::Arc,
            }),
            "mixture-1d" => Ok(Self {
                name: name.into(),
                intrinsic_dim: 1,
                ambient_dim: 1,
                latent: LatentDensity::Product(vec![mixture_1d()?]),
                embedding: Embedding::Identity,
            }),
            "swiss-2-3" => Ok(Self {
                name: name.into(),
                intrinsic_dim: 2,
                ambient_dim: 3,
                latent: LatentDensity::Product(vec![
                    DensitySpec1D::uniform(SWISS_T.0, SWISS_T.1)?,
                    DensitySpec1D::uniform(SWISS_H.0, SWISS_H.1)?,
                ]),
                embedding: Embedding::Swiss { scale: 0.1 },
            }),
            "tanh-embed-2-10" => {
                let latent = LatentDensity::Pair(DensitySpec2D::annulus(1.5, 0.1, 3.5, 1024)?);
                let mut rng = substream(EMBED_SEED, "tanh-embed");
                let q = crate::linalg::random_orthogonal(10, &mut rng);
                let w = standard_normal(&mut rng, 8, 2).map(|v| v * 0.7);
                let b = standard_normal(&mut rng, 1, 8).map(|v| v * 0.3).into_data();
                Ok(Self {
                    name: name.into(),
                    intrinsic_dim: 2,
                    ambient_dim: 10,
                    latent,
                    embedding: Embedding::TanhLift { q, w, b, s: 1.0 },
                })
            }
            other => Err(Error::config(
                "manifold",
                format!("unknown preset `{other}`; expected one of {}", PRESETS.join(", ")),
            )),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn intrinsic_dim(&self) -> usize {
        self.intrinsic_dim
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn latent(&self) -> &LatentDensity {
        &self.latent
    }

    /// Whether [`Self::project`] is closed-form rather than iterative.
    pub fn projection_is_exact(&self) -> bool {
        matches!(self.embedding, Embedding::Identity | Embedding::Arc)
    }

    /// The embedding `g`.
    pub fn embed(&self, u: &[f64]) -> Vec<f64> {
        match &self.embedding {
            Embedding::Identity => u.to_vec(),
            Embedding::Arc => vec![u[0].cos(), u[0].sin()],
            Embedding::Swiss { scale } => {
                let (t, h) = (u[0], u[1]);
                vec![scale * t * t.cos(), scale * h, scale * t * t.sin()]
            }
            Embedding::TanhLift { q, w, b, s } => {
                let mut y = u.to_vec();
                for (k, bk) in b.iter().enumerate() {
                    let a = w.get2(k, 0) * u[0] + w.get2(k, 1) * u[1] + bk;
                    y.push(s * a.tanh());
                }
                (0..10).map(|i| (0..10).map(|j| q.get2(i, j) * y[j]).sum()).collect()
            }
        }
    }

    pub fn embed_batch(&self, latents: &Tensor) -> Result<Tensor> {
        if latents.shape().len() != 2 || latents.cols() != self.intrinsic_dim {
            return Err(Error::Shape(format!(
                "latents must be n x {}, got {:?}",
                self.intrinsic_dim,
                latents.shape()
            )));
        }
        let rows: Vec<Vec<f64>> = latents.row_iter().map(|u| self.embed(u)).collect();
        Tensor::from_rows(&rows)
    }

    /// `n` latent draws by inverse-transform sampling.
    pub fn sample_latents(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let r = self.intrinsic_dim;
        let mut data = Vec::with_capacity(n * r);
        for _ in 0..n {
            let u: Vec<f64> = (0..r).map(|_| rng.random::<f64>()).collect();
            data.extend(self.latent.inverse_cdf(&u)?);
        }
        Tensor::matrix(n, r, data)
    }

    /// Closest point on the manifold.
    pub fn project(&self, x: &[f64]) -> Result<Projection> {
        if x.len() != self.ambient_dim {
            return Err(Error::Shape(format!("expected {} coordinates, got {}", self.ambient_dim, x.len())));
        }
        let latent = match &self.embedding {
            Embedding::Identity => {
                let LatentDensity::Product(d) = &self.latent else { unreachable!() };
                vec![x[0].clamp(d[0].lower(), d[0].upper())]
            }
            Embedding::Arc => {
                let mut t = x[1].atan2(x[0]);
                if t < -0.5 * (2.0 * PI - 3.0) {
                    t += 2.0 * PI;
                }
                vec![t.clamp(0.0, 3.0)]
            }
            Embedding::Swiss { scale } => project_swiss(x, *scale),
            Embedding::TanhLift { q, w, b, s } => project_tanh_lift(x, q, w, b, *s),
        };
        let point = self.embed(&latent);
        let distance = point.iter().zip(x).map(|(p, v)| (p - v).powi(2)).sum::<f64>().sqrt();
        Ok(Projection { point, latent, distance })
    }

    pub fn distance_stats(&self, samples: &Tensor) -> Result<DistanceStats> {
        let mut d = Vec::with_capacity(samples.rows());
        for row in samples.row_iter() {
            d.push(self.project(row)?.distance);
        }
        if d.is_empty() {
            return Err(Error::InvalidArgument("no samples".into()));
        }
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let mean_sq = d.iter().map(|v| v * v).sum::<f64>() / n;
        d.sort_by(f64::total_cmp);
        let p95 = d[((0.95 * n).ceil() as usize).clamp(1, d.len()) - 1];
        Ok(DistanceStats { mean, mean_sq, p95 })
    }

    /// `g o F^-1 o G`: standard normal `z` in `R^r` to a point on the manifold.
    pub fn manifold_decoder(&self, z: &[f64]) -> Result<Vec<f64>> {
        let u = theorem1_decoder(&self.latent, z)?;
        Ok(self.embed(&u))
    }
}

/// `n` exact manifold points, `x = g(u)` with `u ~ p_gt`.
pub fn make_manifold_dataset(spec: &ManifoldSpec, n: usize, seed: u64) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset needs n >= 1".into()));
    }
    let mut rng = substream(seed, "manifold-data");
    let u = spec.sample_latents(n, &mut rng)?;
    spec.embed_batch(&u)
}

fn project_swiss(x: &[f64], scale: f64) -> Vec<f64> {
    let h = (x[1] / scale).clamp(SWISS_H.0, SWISS_H.1);
    let cost = |t: f64| (x[0] - scale * t * t.cos()).powi(2) + (x[2] - scale * t * t.sin()).powi(2);
    let steps = 2000;
    let dt = (SWISS_T.1 - SWISS_T.0) / steps as f64;
    let mut best = SWISS_T.0;
    for k in 0..=steps {
        let t = SWISS_T.0 + k as f64 * dt;
        if cost(t) < cost(best) {
            best = t;
        }
    }
    // Golden-section refinement inside the bracketing cell pair.
    let (mut a, mut b) = ((best - dt).max(SWISS_T.0), (best + dt).min(SWISS_T.1));
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..80 {
        let c = b - phi * (b - a);
        let d = a + phi * (b - a);
        if cost(c) < cost(d) {
            b = d;
        } else {
            a = c;
        }
    }
    vec![0.5 * (a + b), h]
}

fn project_tanh_lift(x: &[f64], q: &Tensor, w: &Tensor, b: &[f64], s: f64) -> Vec<f64> {
    // y = Q^T x; minimize |y_1 - u|^2 + |y_2 - s tanh(W u + b)|^2.
    let y: Vec<f64> = (0..10).map(|j| (0..10).map(|i| q.get2(i, j) * x[i]).sum()).collect();
    let residual = |u: [f64; 2]| -> (Vec<f64>, Vec<[f64; 2]>) {
        let mut r = vec![u[0] - y[0], u[1] - y[1]];
        let mut jac = vec![[1.0, 0.0], [0.0, 1.0]];
        for k in 0..b.len() {
            let a = w.get2(k, 0) * u[0] + w.get2(k, 1) * u[1] + b[k];
            let t = a.tanh();
            r.push(s * t - y[2 + k]);
            let dt = s * (1.0 - t * t);
            jac.push([dt * w.get2(k, 0), dt * w.get2(k, 1)]);
        }
        (r, jac)
    };
    let cost = |u: [f64; 2]| residual(u).0.iter().map(|v| v * v).sum::<f64>();
    let mut u = [y[0], y[1]];
    let mut lambda = 1e-3;
    let mut current = cost(u);
    for _ in 0..200 {
        let (r, jac) = residual(u);
        let mut jtj = [[0.0; 2]; 2];
        let mut jtr = [0.0; 2];
        for (ri, ji) in r.iter().zip(&jac) {
            for a in 0..2 {
                jtr[a] += ji[a] * ri;
                for c in 0..2 {
                    jtj[a][c] += ji[a] * ji[c];
                }
            }
        }
        if jtr[0].abs().max(jtr[1].abs()) < 1e-15 {
            break;
        }
        let m00 = jtj[0][0] * (1.0 + lambda);
        let m11 = jtj[1][1] * (1.0 + lambda);
        let det = m00 * m11 - jtj[0][1] * jtj[1][0];
        let step = [
            -(m11 * jtr[0] - jtj[0][1] * jtr[1]) / det,
            -(m00 * jtr[1] - jtj[1][0] * jtr[0]) / det,
        ];
        let trial = [u[0] + step[0], u[1] + step[1]];
        let c = cost(trial);
        if c < current {
            u = trial;
            current = c;
            lambda = (lambda * 0.3).max(1e-12);
            if step[0].abs().max(step[1].abs()) < 1e-14 {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
    }
    u.to_vec()
}
