mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use twostage_vae::autodiff::{Graph, GradientMap, ParamId};
use twostage_vae::checkpoint;
use twostage_vae::linalg::symmetric_eigenvalues;
use twostage_vae::nn::{Activation, AdamConfig, AdamState, MlpParams};
use twostage_vae::rng::standard_normal;
use twostage_vae::vae::{elbo_loss, kl_term, optimal_posterior_covariance, sample_ancestral, VaeModel};
use twostage_vae::Tensor;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| Tensor::matrix(rows, cols, v).unwrap())
}

fn kl_value(mu: &Tensor, logvar: &Tensor) -> f64 {
    let mut g = Graph::new();
    let m = g.input(mu.clone());
    let l = g.input(logvar.clone());
    let k = kl_term(&mut g, m, l).unwrap();
    g.value(k).item()
}

proptest! {
    #![proptest_config(common::proptest_config(64))]

    #[test]
    fn kl_is_non_negative(
        (mu, lv) in (1usize..6, 1usize..6).prop_flat_map(|(b, k)| (matrix(b, k, -4.0, 4.0), matrix(b, k, -6.0, 3.0)))
    ) {
        prop_assert!(kl_value(&mu, &lv) >= 0.0);
    }

    #[test]
    fn kl_vanishes_only_at_standard_posterior(
        b in 1usize..5, k in 1usize..5, i in 0usize..25, delta in prop_oneof![-1.0..-1e-3, 1e-3..1.0], which in 0usize..2
    ) {
        let zeros = Tensor::zeros(&[b, k]);
        prop_assert_eq!(kl_value(&zeros, &zeros), 0.0);
        let mut mu = zeros.clone();
        let mut lv = zeros.clone();
        let target = if which == 0 { &mut mu } else { &mut lv };
        target.data_mut()[i % (b * k)] = delta;
        prop_assert!(kl_value(&mu, &lv) > 0.0);
    }

    #[test]
    fn elbo_is_exactly_recon_plus_kl(seed in any::<u64>(), d in 1usize..6, k in 1usize..6, b in 1usize..6) {
        let m = VaeModel::new(d, k, &[5], seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = standard_normal(&mut rng, b, d);
        let eps = standard_normal(&mut rng, b, k);
        let mut g = Graph::new();
        let n = elbo_loss(&m, &mut g, &x, &eps).unwrap();
        prop_assert_eq!(g.value(n.loss).item(), g.value(n.recon).item() + g.value(n.kl).item());
    }

    #[test]
    fn mlp_is_permutation_equivariant(seed in any::<u64>(), rows in 2usize..9, perm_seed in any::<u64>()) {
        let net = MlpParams::init(&[3, 6, 2], Activation::Tanh, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x = standard_normal(&mut rng, rows, 3);
        let mut perm: Vec<usize> = (0..rows).collect();
        let mut prng = ChaCha8Rng::seed_from_u64(perm_seed);
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut prng);
        let y = net.apply(&x).unwrap();
        let y_perm = net.apply(&x.select_rows(&perm)).unwrap();
        prop_assert_eq!(y_perm, y.select_rows(&perm));
        prop_assert_eq!(net.apply(&x).unwrap(), y);
    }

    #[test]
    fn adam_zero_gradient_is_exact_fixed_point(vals in prop::collection::vec(-10.0f64..10.0, 1..12), steps in 1usize..20) {
        let mut p = Tensor::new(vec![vals.len()], vals.clone()).unwrap();
        let before = p.clone();
        let mut adam = AdamState::new(&[&p], AdamConfig { lr: 0.1, ..Default::default() });
        let mut grads = GradientMap::default();
        grads.insert(ParamId(0), Tensor::zeros(&[vals.len()]));
        for _ in 0..steps {
            adam.step(&mut [&mut p], &grads).unwrap();
        }
        prop_assert_eq!(p, before);
    }

    #[test]
    fn posterior_covariance_scales_with_gamma_and_fixes_null_space(seed in any::<u64>(), d in 2usize..8, kappa in 2usize..7) {
        let (j, sv, rank) = common::low_rank_jacobian(seed, d, kappa);
        let eig = |g: f64| symmetric_eigenvalues(&optimal_posterior_covariance(&j, g).unwrap());
        let gammas = [1e-2, 1e-3, 1e-4];
        let spectra: Vec<Vec<f64>> = gammas.iter().map(|&g| eig(g)).collect();
        for (s, &g) in spectra.iter().zip(&gammas) {
            let mut s = s.clone();
            s.sort_by(f64::total_cmp);
            for (i, &e) in s[..rank].iter().enumerate() {
                let expected = g / (sv[rank - 1 - i] * sv[rank - 1 - i]);
                prop_assert!((e / expected - 1.0).abs() < 0.05, "gamma {g}: {e} vs {expected}");
            }
            // Exact in exact arithmetic; the residual is bounded by the
            // condition number of I + J^T J / gamma times machine epsilon.
            for &e in &s[rank..] {
                prop_assert!((e - 1.0).abs() < 1e-9, "null-space eigenvalue {e}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(seed in any::<u64>(), d in 1usize..6, k in 1usize..6, h in 1usize..6, lg in -10.0f64..3.0) {
        let mut m = VaeModel::new(d, k, &[h, h + 1], seed).unwrap();
        m.set_log_gamma(lg);
        let back = checkpoint::from_bytes(&checkpoint::to_bytes(&m)).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(sample_ancestral(&back, 7, seed, false).unwrap(), sample_ancestral(&m, 7, seed, false).unwrap());
    }

    #[test]
    fn checkpoint_truncation_is_always_rejected(seed in any::<u64>(), cut in 0usize..10_000) {
        let m = VaeModel::new(3, 2, &[4], seed).unwrap();
        let bytes = checkpoint::to_bytes(&m);
        let cut = cut % bytes.len();
        prop_assert!(checkpoint::from_bytes(&bytes[..cut]).is_err());
    }
}
