//! Small dense symmetric-matrix helpers built on nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub const SYMMETRY_TOL: f64 = 1e-10;
pub const EIGEN_FLOOR: f64 = -1e-10;

pub fn max_asymmetry(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

fn check_square_symmetric(a: &DMatrix<f64>) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::Decomposition {
            reason: format!("matrix is {}x{}, not square", a.nrows(), a.ncols()),
            min_eigenvalue: f64::NAN,
        });
    }
    let asym = max_asymmetry(a);
    if asym > SYMMETRY_TOL * a.norm().max(1.0) {
        let min = min_eigenvalue(&symmetrize(a));
        return Err(Error::Decomposition {
            reason: format!("matrix is not symmetric (max |a_ij - a_ji| = {asym:e})"),
            min_eigenvalue: min,
        });
    }
    Ok(())
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(a)).eigenvalues.min()
}

/// Symmetric square root `U diag(sqrt(l)) U^T`. Eigenvalues in
/// `[-1e-10, 0)` are clamped to zero.
pub fn psd_sqrt(theta: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spectral_map(theta, f64::sqrt, false)
}

/// Inverse symmetric square root of a positive-definite matrix.
pub fn spd_inv_sqrt(theta: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    spectral_map(theta, |l| 1.0 / l.sqrt(), true)
}

fn spectral_map(
    theta: &DMatrix<f64>,
    f: impl Fn(f64) -> f64,
    strict: bool,
) -> Result<DMatrix<f64>> {
    check_square_symmetric(theta)?;
    let eig = SymmetricEigen::new(symmetrize(theta));
    let min = eig.eigenvalues.min();
    let floor = if strict { 0.0 } else { EIGEN_FLOOR };
    if !(min > floor || (!strict && min >= floor)) {
        return Err(Error::Decomposition {
            reason: if strict {
                "matrix is not positive definite".into()
            } else {
                "matrix is indefinite".into()
            },
            min_eigenvalue: min,
        });
    }
    let mapped = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| f(l.max(0.0))),
    );
    let u = &eig.eigenvectors;
    Ok(symmetrize(&(u * DMatrix::from_diagonal(&mapped) * u.transpose())))
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = a.clone().cholesky().ok_or_else(|| Error::Decomposition {
        reason: "Cholesky factorization failed".into(),
        min_eigenvalue: min_eigenvalue(a),
    })?;
    Ok(symmetrize(&chol.inverse()))
}

pub fn log_det_spd(a: &DMatrix<f64>) -> Result<f64> {
    let chol = a.clone().cholesky().ok_or_else(|| Error::Decomposition {
        reason: "Cholesky factorization failed".into(),
        min_eigenvalue: min_eigenvalue(a),
    })?;
    Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

pub fn is_pd(a: &DMatrix<f64>) -> bool {
    a.clone().cholesky().is_some()
}

pub fn is_psd(a: &DMatrix<f64>, tol: f64) -> bool {
    max_asymmetry(a) <= SYMMETRY_TOL * a.norm().max(1.0) && min_eigenvalue(a) >= -tol
}

/// Row-major copy, convenient for hot loops over small matrices.
pub fn to_row_major(a: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len());
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            out.push(a[(i, j)]);
        }
    }
    out
}
