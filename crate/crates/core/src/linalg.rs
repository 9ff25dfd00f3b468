//! Small dense linear-algebra helpers on top of `nalgebra`.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[cfg(not(feature = "std"))]
use num_traits::Float;

/// Solves `a x = b` for symmetric positive-definite `a`.
pub fn spd_solve(a: &DMatrix<f64>, b: &[f64]) -> Option<Vec<f64>> {
    let chol = a.clone().cholesky()?;
    let x = chol.solve(&DVector::from_column_slice(b));
    x.iter().all(|v| v.is_finite()).then(|| x.as_slice().to_vec())
}

/// Inverse of a symmetric positive-definite matrix, symmetrized.
pub fn spd_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let inv = a.clone().cholesky()?.inverse();
    if inv.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(symmetrize(&inv))
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    symmetrize(a).symmetric_eigen().eigenvalues.min()
}

/// Projects a symmetric matrix onto the PSD cone by clipping negative
/// eigenvalues at zero. Returns the projection and whether clipping occurred.
pub fn nearest_psd(a: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let eig = symmetrize(a).symmetric_eigen();
    if eig.eigenvalues.iter().all(|&v| v >= 0.0) {
        return (symmetrize(a), false);
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let v = &eig.eigenvectors;
    let out = v * DMatrix::from_diagonal(&clipped) * v.transpose();
    (symmetrize(&out), true)
}

/// Factor `F` with `F F^T = a` for symmetric PSD `a` (eigen square root, so
/// singular matrices are accepted).
pub fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(a).symmetric_eigen();
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

/// `m x m` matrix from a row-major slice.
pub fn from_row_major(m: usize, data: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(m, m, data)
}

pub fn to_row_major(a: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len());
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            out.push(a[(i, j)]);
        }
    }
    out
}
