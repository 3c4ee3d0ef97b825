mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use twostage_vae::diagnostics::energy_permutation_test;
use twostage_vae::experiments::{normal_convolution_tv, normal_posterior_kl};
use twostage_vae::linalg::symmetric_eigenvalues;
use twostage_vae::manifolds::*;
use twostage_vae::rng::standard_normal;
use twostage_vae::special::{gaussian_cdf, inverse_gaussian_cdf};
use twostage_vae::Tensor;

fn normal() -> LatentDensity {
    LatentDensity::Product(vec![DensitySpec1D::standard_normal()])
}

#[test]
fn conditional_cdf_landmarks() {
    assert!((conditional_cdf_f(&normal(), &[0.0]).unwrap()[0] - 0.5).abs() < 1e-12);
    let uniform = LatentDensity::Product(vec![DensitySpec1D::uniform(0.0, 1.0).unwrap()]);
    assert!((conditional_cdf_f(&uniform, &[0.3]).unwrap()[0] - 0.3).abs() < 1e-12);
    let mixture = LatentDensity::Product(vec![mixture_1d().unwrap()]);
    assert!((conditional_cdf_f(&mixture, &[0.0]).unwrap()[0] - 0.5).abs() < 1e-6);
    assert!(conditional_cdf_f(&uniform, &[1.5]).is_err());
}

#[test]
fn gaussian_cdf_landmarks() {
    assert_eq!(gaussian_cdf(0.0), 0.5);
    assert!((gaussian_cdf(1.959964) - 0.975).abs() < 1e-6);
    for z in [-3.0, -1.0, 0.0, 1.0, 3.0] {
        assert!((inverse_gaussian_cdf(gaussian_cdf(z)).unwrap() - z).abs() < 1e-9);
    }
    assert!(inverse_gaussian_cdf(0.0).is_err());
    assert!(inverse_gaussian_cdf(1.0).is_err());
}

#[test]
fn cdf_is_increasing_and_reaches_boundaries() {
    for name in ["normal-1d", "uniform-1d", "mixture-1d"] {
        let d = density_by_name(name).unwrap();
        assert!(d.cdf(d.lower()).unwrap().abs() < 1e-9, "{name}");
        assert!((d.cdf(d.upper()).unwrap() - 1.0).abs() < 1e-9, "{name}");
        let n = 20_000;
        let mut prev = d.cdf(d.lower()).unwrap();
        for i in 1..=n {
            let x = d.lower() + (d.upper() - d.lower()) * i as f64 / n as f64;
            let c = d.cdf(x).unwrap();
            if c < 1.0 - 1e-12 {
                assert!(c > prev, "{name}: F({x}) = {c} not above {prev}");
            } else {
                assert!(c >= prev, "{name}: F({x}) = {c} below {prev}");
            }
            prev = c;
        }
    }
}

#[test]
fn analytic_decoder_landmarks() {
    for i in 0..=60 {
        let z = -3.0 + 0.1 * i as f64;
        assert!((theorem1_decoder(&normal(), &[z]).unwrap()[0] - z).abs() < 1e-6, "z = {z}");
    }
    let uniform = LatentDensity::Product(vec![DensitySpec1D::uniform(0.0, 1.0).unwrap()]);
    assert!((theorem1_decoder(&uniform, &[0.0]).unwrap()[0] - 0.5).abs() < 1e-12);
    let mixture = LatentDensity::Product(vec![mixture_1d().unwrap()]);
    let x = theorem1_decoder(&mixture, &[0.7]).unwrap();
    assert!((theorem1_encoder(&mixture, &x).unwrap()[0] - 0.7).abs() < 1e-9);
}

#[test]
fn decoder_pushforward_matches_target_cdf() {
    for name in ["normal-1d", "uniform-1d", "mixture-1d"] {
        let d = density_by_name(name).unwrap();
        let ks = theorem1_pushforward_ks(&d, 100_000, 5).unwrap();
        assert!(ks < 0.01, "{name}: KS {ks}");
    }
}

#[test]
fn smoothed_density_has_unit_mass() {
    for name in ["normal-1d", "uniform-1d", "mixture-1d"] {
        let d = density_by_name(name).unwrap();
        for gamma in [1e-2, 1e-3, 1e-4] {
            let m = theorem1_density_mass(&d, gamma).unwrap();
            assert!((m - 1.0).abs() < 1e-6, "{name} gamma {gamma}: mass {m}");
        }
    }
}

#[test]
fn normal_smoothing_is_exact_convolution() {
    let d = DensitySpec1D::standard_normal();
    for gamma in [0.5, 1e-2, 1e-4] {
        for x in [-2.5, -0.3, 0.0, 1.7] {
            let s2: f64 = 1.0 + gamma;
            let exact = (-0.5 * x * x / s2).exp() / (2.0 * std::f64::consts::PI * s2).sqrt();
            assert!((theorem1_density(&d, gamma, x).unwrap() - exact).abs() < 1e-8);
        }
        assert!((theorem1_tv(&d, gamma).unwrap() - normal_convolution_tv(gamma)).abs() < 1e-6);
    }
}

/// The analytic encoder is `N(x, gamma)` while the exact posterior is
/// `N(x / (1 + gamma), gamma / (1 + gamma))`; the KL is small but not zero.
#[test]
fn normal_posterior_kl_matches_conjugate_closed_form() {
    let d = DensitySpec1D::standard_normal();
    for gamma in [1e-2, 1e-3, 1e-4] {
        for x in [-2.0, -0.5, 0.0, 1.3] {
            let kl = theorem1_posterior_kl_at(&d, gamma, x).unwrap();
            assert!((kl - normal_posterior_kl(gamma, x)).abs() < 1e-6, "gamma {gamma} x {x}");
        }
    }
}

#[test]
fn mixture_convergence_direction() {
    let d = mixture_1d().unwrap();
    let tv: Vec<f64> = [1e-2, 1e-3, 1e-4].iter().map(|&g| theorem1_tv(&d, g).unwrap()).collect();
    assert!(tv[0] > tv[1] && tv[1] > tv[2], "{tv:?}");
    assert!(tv[2] < 0.01);
    let kl_hi = theorem1_posterior_kl(&d, 1e-2).unwrap();
    let kl_lo = theorem1_posterior_kl(&d, 1e-4).unwrap();
    assert!(kl_hi > kl_lo, "{kl_hi} vs {kl_lo}");
}

#[test]
fn arc_dataset_lies_on_unit_circle() {
    let spec = ManifoldSpec::preset("circle-arc").unwrap();
    let x = make_manifold_dataset(&spec, 2000, 3).unwrap();
    for row in x.row_iter() {
        assert!((row[0] * row[0] + row[1] * row[1] - 1.0).abs() < 1e-12);
    }
}

#[test]
fn manifold_decoder_lands_on_the_manifold() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for name in PRESETS {
        let spec = ManifoldSpec::preset(name).unwrap();
        let z = standard_normal(&mut rng, 200, spec.intrinsic_dim());
        for row in z.row_iter() {
            let x = spec.manifold_decoder(row).unwrap();
            let p = spec.project(&x).unwrap();
            assert!(p.distance < 1e-10, "{name}: distance {}", p.distance);
        }
    }
    let arc = ManifoldSpec::preset("circle-arc").unwrap();
    let x = arc.manifold_decoder(&[0.0]).unwrap();
    let m = match arc.latent() {
        LatentDensity::Product(d) => d[0].median(),
        LatentDensity::Pair(_) => unreachable!(),
    };
    assert!((x[0] - m.cos()).abs() < 1e-12 && (x[1] - m.sin()).abs() < 1e-12);
}

#[test]
fn manifold_decoder_pushforward_matches_dataset() {
    let spec = ManifoldSpec::preset("tanh-embed-2-10").unwrap();
    let n = 1500;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let z = standard_normal(&mut rng, n, 2);
    let rows: Vec<Vec<f64>> = z.row_iter().map(|r| spec.manifold_decoder(r).unwrap()).collect();
    let pushed = Tensor::from_rows(&rows).unwrap();
    let data = make_manifold_dataset(&spec, n, 4).unwrap();
    let t = energy_permutation_test(&pushed, &data, 200, &mut rng).unwrap();
    assert!(t.statistic < t.null_p95, "{} vs null p95 {}", t.statistic, t.null_p95);
}

#[test]
fn mixture_dataset_matches_analytic_cdf() {
    let spec = ManifoldSpec::preset("mixture-1d").unwrap();
    let x = make_manifold_dataset(&spec, 10_000, 6).unwrap();
    let d = mixture_1d().unwrap();
    let mut xs = x.into_data();
    let ks = ks_statistic(&mut xs, |v| d.cdf(v.clamp(d.lower(), d.upper())).unwrap()).unwrap();
    assert!(ks < 0.02, "{ks}");
}

/// Local PCA on 20-nearest-neighbour patches: two components carry at
/// least 95% of the variance.
#[test]
fn tanh_embedding_has_intrinsic_dimension_two() {
    let spec = ManifoldSpec::preset("tanh-embed-2-10").unwrap();
    let x = make_manifold_dataset(&spec, 2000, 9).unwrap();
    let (n, d) = x.dims2();
    let mut ratios = Vec::new();
    for center in (0..n).step_by(40) {
        let c = x.row(center);
        let mut dist: Vec<(f64, usize)> = (0..n)
            .map(|j| (x.row(j).iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), j))
            .collect();
        dist.sort_by(|a, b| a.0.total_cmp(&b.0));
        let idx: Vec<usize> = dist[..20].iter().map(|p| p.1).collect();
        let patch = x.select_rows(&idx);
        let mean = patch.col_means();
        let mut cov = vec![0.0; d * d];
        for row in patch.row_iter() {
            for a in 0..d {
                for b in 0..d {
                    cov[a * d + b] += (row[a] - mean[a]) * (row[b] - mean[b]) / 20.0;
                }
            }
        }
        let mut eig = symmetric_eigenvalues(&Tensor::matrix(d, d, cov).unwrap());
        eig.sort_by(|a, b| b.total_cmp(a));
        let total: f64 = eig.iter().sum();
        ratios.push((eig[0] + eig[1]) / total);
    }
    let worst = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    assert!(mean >= 0.95, "mean explained ratio {mean}");
    assert!(worst >= 0.9, "worst explained ratio {worst}");
}

#[test]
fn annulus_pair_density_round_trips() {
    let ring = DensitySpec2D::annulus(1.5, 0.2, 3.5, 512).unwrap();
    let latent = LatentDensity::Pair(ring);
    for u in [[0.1, 0.2], [0.5, 0.5], [0.9, 0.05], [0.3, 0.97]] {
        let x = latent.inverse_cdf(&u).unwrap();
        let back = latent.cdf(&x).unwrap();
        assert!((back[0] - u[0]).abs() < 1e-9 && (back[1] - u[1]).abs() < 1e-9, "{u:?} -> {x:?} -> {back:?}");
    }
}

proptest! {
    #![proptest_config(common::proptest_config(32))]

    #[test]
    fn decoder_and_encoder_are_inverse(z in -4.0f64..4.0) {
        let mixture = LatentDensity::Product(vec![mixture_1d().unwrap()]);
        let x = theorem1_decoder(&mixture, &[z]).unwrap();
        prop_assert!((theorem1_encoder(&mixture, &x).unwrap()[0] - z).abs() < 1e-7);
    }

    #[test]
    fn projection_of_manifold_points_is_exact(seed in any::<u64>(), which in 0usize..4) {
        let spec = ManifoldSpec::preset(PRESETS[which]).unwrap();
        let x = make_manifold_dataset(&spec, 5, seed).unwrap();
        for row in x.row_iter() {
            prop_assert!(spec.project(row).unwrap().distance < 1e-10);
        }
    }
}
