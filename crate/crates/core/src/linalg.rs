//! Small dense linear-algebra helpers shared by the solver modules.

use nalgebra::{Cholesky, DMatrix, DVector, Schur};

use crate::error::{Result, SofError};

pub type Mat = DMatrix<f64>;

/// Relative tolerance for numerical rank and definiteness tests.
pub const RANK_RTOL: f64 = 1e-10;

const SCHUR_MAX_ITERS: usize = 10_000;

/// Induced 2-norm.
pub fn spectral_norm(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

pub fn sigma_min(m: &Mat) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().min()
}

pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &Mat) -> Vec<f64> {
    let mut ev: Vec<f64> = symmetrize(m).symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

pub fn sym_min_eig(m: &Mat) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(0.0)
}

pub fn sym_max_eig(m: &Mat) -> f64 {
    sym_eigenvalues(m).last().copied().unwrap_or(0.0)
}

/// Number of singular values above `RANK_RTOL` times the largest one.
pub fn numerical_rank(m: &Mat) -> usize {
    if m.is_empty() {
        return 0;
    }
    let sv = m.singular_values();
    let tol = RANK_RTOL * sv.max();
    sv.iter().filter(|&&s| s > tol).count()
}

/// Positive definite in the relative sense used throughout: the smallest
/// eigenvalue exceeds `RANK_RTOL` times the largest magnitude eigenvalue.
pub fn is_positive_definite(m: &Mat) -> bool {
    let ev = sym_eigenvalues(m);
    match (ev.first(), ev.last()) {
        (Some(&lo), Some(&hi)) => lo > RANK_RTOL * hi.abs().max(lo.abs()) && lo > 0.0,
        _ => false,
    }
}

/// Largest eigenvalue modulus, via a real Schur decomposition.
pub fn spectral_radius(m: &Mat) -> Result<f64> {
    if m.is_empty() {
        return Ok(0.0);
    }
    let schur = Schur::try_new(m.clone(), f64::EPSILON, SCHUR_MAX_ITERS).ok_or(
        SofError::EigenNonConvergence {
            iterations: SCHUR_MAX_ITERS,
        },
    )?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max))
}

/// Column-major vectorization.
pub fn vec_col(m: &Mat) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

pub fn unvec_col(v: &DVector<f64>, rows: usize, cols: usize) -> Mat {
    Mat::from_column_slice(rows, cols, v.as_slice())
}

/// `x * s^{-1}` for symmetric positive definite `s`, via Cholesky.
pub fn solve_right_spd(x: &Mat, s: &Mat, name: &'static str) -> Result<Mat> {
    let chol = Cholesky::new(symmetrize(s)).ok_or(SofError::NotPositiveDefinite { name })?;
    // x s^{-1} = (s^{-1} x^T)^T since s is symmetric.
    Ok(chol.solve(&x.transpose()).transpose())
}

/// `s^{-1} * x` for symmetric positive definite `s`, via Cholesky.
pub fn solve_left_spd(s: &Mat, x: &Mat, name: &'static str) -> Result<Mat> {
    let chol = Cholesky::new(symmetrize(s)).ok_or(SofError::NotPositiveDefinite { name })?;
    Ok(chol.solve(x))
}

/// Row-major nested vectors, the layout of the JSON system files.
pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn from_rows(field: &'static str, rows: &[Vec<f64>]) -> Result<Mat> {
    if rows.is_empty() {
        return Err(SofError::Malformed {
            field,
            reason: "matrix has no rows".into(),
        });
    }
    let cols = rows[0].len();
    if cols == 0 {
        return Err(SofError::Malformed {
            field,
            reason: "matrix has no columns".into(),
        });
    }
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != cols) {
        return Err(SofError::Malformed {
            field,
            reason: format!("row {i} has {} entries, expected {cols}", r.len()),
        });
    }
    Ok(Mat::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

/// Row-major flattening, the column order of the CSV run logs.
pub fn flatten_row_major(m: &Mat) -> Vec<f64> {
    m.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect()
}
