//! Standard normal CDF and quantile.

use std::f64::consts::{PI, SQRT_2};

use crate::error::{Error, Result};

/// `G(z) = P(Z <= z)` for `Z ~ N(0, 1)`.
pub fn gaussian_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

pub fn gaussian_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

pub fn gaussian_log_pdf(z: f64) -> f64 {
    -0.5 * z * z - 0.5 * (2.0 * PI).ln()
}

/// Inverse of [`gaussian_cdf`] on the open interval `(0, 1)`.
pub fn inverse_gaussian_cdf(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("inverse normal CDF needs p in (0, 1), got {p}")));
    }
    if p > 0.5 {
        return Ok(-lower_quantile(1.0 - p));
    }
    Ok(lower_quantile(p))
}

// Acklam's rational approximation followed by Halley steps against erfc.
fn lower_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838,
        -2.549732539343734,
        4.374664141464968,
        2.938163982698783,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996,
        3.754408661907416,
    ];
    let mut x = if p < 0.02425 {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    };
    for _ in 0..2 {
        let e = gaussian_cdf(x) - p;
        let u = e * (2.0 * PI).sqrt() * (0.5 * x * x).exp();
        x -= u / (1.0 + 0.5 * x * u);
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_landmarks() {
        assert_eq!(gaussian_cdf(0.0), 0.5);
        assert!((gaussian_cdf(1.959964) - 0.975).abs() < 1e-6);
    }

    #[test]
    fn cdf_matches_simpson_quadrature() {
        // Independent check: composite Simpson on the density from -12.
        for &z in &[-6.0, -3.0, -1.0, 0.5, 2.0, 6.0] {
            let (a, n) = (-12.0, 200_000);
            let h = (z - a) / n as f64;
            let mut s = gaussian_pdf(a) + gaussian_pdf(z);
            for i in 1..n {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                s += w * gaussian_pdf(a + i as f64 * h);
            }
            let quad = s * h / 3.0;
            let g = gaussian_cdf(z);
            assert!(((g - quad) / quad).abs() < 1e-10, "z={z}: {g} vs {quad}");
        }
    }

    #[test]
    fn round_trip() {
        for &z in &[-3.0, -1.0, 0.0, 1.0, 3.0, -8.0] {
            let back = inverse_gaussian_cdf(gaussian_cdf(z)).unwrap();
            assert!((back - z).abs() < 1e-9, "{z} -> {back}");
        }
    }

    #[test]
    fn inverse_rejects_endpoints() {
        assert!(inverse_gaussian_cdf(0.0).is_err());
        assert!(inverse_gaussian_cdf(1.0).is_err());
        assert!(inverse_gaussian_cdf(f64::NAN).is_err());
    }
}
