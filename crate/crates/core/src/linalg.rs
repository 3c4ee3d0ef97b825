//! Thin bridges from [`Tensor`] to nalgebra decompositions.

use nalgebra::DMatrix;

use crate::tensor::Tensor;

pub fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    let (r, c) = t.dims2();
    DMatrix::from_row_slice(r, c, t.data())
}

pub fn from_dmatrix(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(m[(i, j)]);
        }
    }
    Tensor::from_parts(vec![r, c], data)
}

/// Eigenvalues of a symmetric matrix, unordered.
pub fn symmetric_eigenvalues(t: &Tensor) -> Vec<f64> {
    let m = to_dmatrix(t);
    let m = (&m + m.transpose()) * 0.5;
    m.symmetric_eigenvalues().iter().copied().collect()
}

/// Singular values, largest first.
pub fn singular_values(t: &Tensor) -> Vec<f64> {
    let mut sv: Vec<f64> = to_dmatrix(t).singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Random orthogonal matrix from the QR factor of a Gaussian matrix, with
/// column signs fixed so the result is Haar distributed.
pub fn random_orthogonal(n: usize, rng: &mut impl rand::Rng) -> Tensor {
    let g = to_dmatrix(&crate::rng::standard_normal(rng, n, n));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    from_dmatrix(&q)
}

/// Largest absolute entry of `Q^T Q - I`.
pub fn orthogonality_error(q: &Tensor) -> f64 {
    let m = to_dmatrix(q);
    let e = m.transpose() * &m - DMatrix::identity(m.ncols(), m.ncols());
    e.amax()
}
