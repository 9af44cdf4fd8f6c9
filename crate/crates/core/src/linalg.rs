//! Dense linear algebra helpers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{CossoError, Result};

/// Symmetric eigendecomposition with a reconstruction check.
///
/// The QR iteration in nalgebra 0.33 can return orthonormal but wrong
/// eigenvectors on some well-conditioned inputs, so the decomposition is
/// delegated to faer and verified against `‖V Λ Vᵀ - A‖ ≤ 1e-10 ‖A‖`.
pub fn symmetric_eigen(a: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let k = a.nrows();
    let a = (a + a.transpose()) * 0.5;
    let m = faer::Mat::from_fn(k, k, |i, j| a[(i, j)]);
    let e = m.selfadjoint_eigendecomposition(faer::Side::Lower);
    let (s, u) = (e.s().column_vector(), e.u());
    let eigenvalues = DVector::from_fn(k, |i, _| s.read(i));
    let eigenvectors = DMatrix::from_fn(k, k, |i, j| u.read(i, j));
    let rec = &eigenvectors * DMatrix::from_diagonal(&eigenvalues) * eigenvectors.transpose();
    let err = (rec - &a).amax() / a.amax().max(f64::MIN_POSITIVE);
    if !(err <= 1e-10) {
        return Err(CossoError::numerical(
            format!("symmetric eigendecomposition failed its reconstruction check (relative error {err:e})"),
            f64::INFINITY,
        ));
    }
    Ok(SymmetricEigen { eigenvectors, eigenvalues })
}
