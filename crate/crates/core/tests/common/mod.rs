#![allow(dead_code)]

use proptest::test_runner::{Config, RngSeed};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twostage_vae::autodiff::{finite_difference_grad, Graph, GradientMap, ParamId};
use twostage_vae::linalg::random_orthogonal;
use twostage_vae::rng::standard_normal;
use twostage_vae::vae::{elbo_loss, VaeModel};
use twostage_vae::Tensor;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const GRAD_FLOOR: f64 = 1e-8;

/// Worst relative error over coordinates with `|analytic| > GRAD_FLOOR`,
/// and how many coordinates were compared.
pub fn compare(analytic: &GradientMap, numeric: &GradientMap, n_params: usize) -> (f64, usize) {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for i in 0..n_params {
        let id = ParamId(i);
        let n = numeric.get(id).expect("numeric gradient present");
        let a = analytic.get(id).cloned().unwrap_or_else(|| Tensor::zeros(n.shape()));
        for (&ai, &ni) in a.data().iter().zip(n.data()) {
            if ai.abs() > GRAD_FLOOR {
                worst = worst.max(((ai - ni) / ai).abs());
                checked += 1;
            }
        }
    }
    (worst, checked)
}

/// A random small VAE, data batch and noise draw.
pub struct ElboCase {
    pub model: VaeModel,
    pub x: Tensor,
    pub eps: Tensor,
}

impl ElboCase {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(1..=6);
        let kappa = rng.random_range(1..=6);
        let depth = rng.random_range(1..=2);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=8)).collect();
        let batch = rng.random_range(1..=5);
        let mut model = VaeModel::new(d, kappa, &hidden, rng.random()).unwrap();
        model.set_log_gamma(rng.random_range(-2.0..1.0));
        let x = standard_normal(&mut rng, batch, d);
        let eps = standard_normal(&mut rng, batch, kappa);
        Self { model, x, eps }
    }

    pub fn loss_at(&self, params: &[Tensor]) -> twostage_vae::Result<f64> {
        let m = self.model.with_parameters(params)?;
        let mut g = Graph::new();
        let nodes = elbo_loss(&m, &mut g, &self.x, &self.eps)?;
        Ok(g.value(nodes.loss).item())
    }

    /// `(worst relative error, coordinates compared)`.
    pub fn check(&self) -> (f64, usize) {
        let mut g = Graph::new();
        let nodes = elbo_loss(&self.model, &mut g, &self.x, &self.eps).unwrap();
        let analytic = g.backward(nodes.loss).unwrap();
        let params: Vec<Tensor> = self.model.parameters().into_iter().cloned().collect();
        let numeric = finite_difference_grad(|p| self.loss_at(p), &params, FD_STEP).unwrap();
        compare(&analytic, &numeric, params.len())
    }
}

/// Fixed-seed proptest settings so that every run explores the same cases.
pub fn proptest_config(cases: u32) -> Config {
    Config { cases, rng_seed: RngSeed::Fixed(0x2545_f491), failure_persistence: None, ..Config::default() }
}

/// `J = U diag(s) V^T` with random orthogonal `U`, `V` and rank
/// `1 + seed mod min(kappa - 1, d)`, so `J` is always rank deficient.
/// Returns `(J, s, rank)` with `s` ascending from 0.5 in unit steps.
pub fn low_rank_jacobian(seed: u64, d: usize, kappa: usize) -> (Tensor, Vec<f64>, usize) {
    let rank = 1 + (seed as usize) % (kappa - 1).min(d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = random_orthogonal(d, &mut rng);
    let v = random_orthogonal(kappa, &mut rng);
    let sv: Vec<f64> = (0..rank).map(|i| 0.5 + i as f64).collect();
    let mut j = vec![0.0; d * kappa];
    for a in 0..d {
        for b in 0..kappa {
            j[a * kappa + b] = (0..rank).map(|i| u.get2(a, i) * sv[i] * v.get2(b, i)).sum();
        }
    }
    (Tensor::matrix(d, kappa, j).unwrap(), sv, rank)
}
