//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid, shape_err, Error, Result};

/// Row-major nested vectors to a matrix; every row must have `cols` entries.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map(Vec::len).unwrap_or(0);
    if rows.iter().any(|r| r.len() != ncols) {
        return shape_err("matrix rows have different lengths");
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Induced infinity norm (max absolute row sum).
pub fn norm_inf(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows())
        .map(|i| m.row(i).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Spectral radius estimate from Gelfand's formula `||A^k||^{1/k}` with
/// repeated squaring up to `k = 2^40`; renormalised each step so large
/// powers neither overflow nor underflow.
pub fn spectral_radius(a: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() != a.ncols() {
        return shape_err("spectral radius of a non-square matrix");
    }
    if a.nrows() == 0 {
        return Ok(0.0);
    }
    let mut p = a.clone();
    // log ||A^k|| = log_scale + log ||p||
    let mut log_scale = 0.0;
    let mut k = 1.0f64;
    let mut estimate = norm_inf(a);
    for _ in 0..40 {
        let n = norm_inf(&p);
        if n == 0.0 {
            return Ok(0.0);
        }
        estimate = ((log_scale + n.ln()) / k).exp();
        log_scale += n.ln();
        p /= n;
        p = &p * &p;
        log_scale *= 2.0;
        k *= 2.0;
    }
    Ok(estimate)
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    m.nrows() == m.ncols()
        && (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol))
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m = (&*m + t) * 0.5;
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Solves `P = A P A^T + Q` by the doubling iteration; requires `rho(A) < 1`.
pub fn discrete_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let rho = spectral_radius(a)?;
    if rho >= 1.0 {
        return Err(Error::SpectralRadius(rho));
    }
    let mut ak = a.clone();
    let mut p = q.clone();
    for _ in 0..64 {
        let next = &p + &ak * &p * ak.transpose();
        let delta = (&next - &p).abs().max();
        p = next;
        ak = &ak * &ak;
        if delta <= 1e-15 * p.abs().max().max(1e-300) {
            break;
        }
    }
    symmetrize(&mut p);
    Ok(p)
}

/// Cholesky factor of a positive semi-definite matrix, with a small jitter
/// fallback for singular (but PSD) inputs.
pub fn psd_cholesky(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(c) = m.clone().cholesky() {
        return Ok(c.l());
    }
    // Singular PSD: factor through the eigen-decomposition.
    let eig = m.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l < -1e-10 * (1.0 + m.abs().max())) {
        return invalid("matrix is not positive semi-definite");
    }
    let sqrt = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt))
}
