//! Exact policy gradient, natural and Gauss-Newton directions, and the
//! second-order machinery (directional Hessian and its assembled matrix).

use serde::Serialize;

use crate::error::{Result, SofError};
use crate::linalg::{self, Mat};
use crate::lyapunov::{self, ClosedLoopEval};
use crate::model::{Gain, LtiSystem};

/// `L_K` is treated as singular when `sigma_min <= 1e-12 * sigma_max`.
pub const OUTPUT_CORRELATION_RCOND: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    /// `E_K = (R + B^T P B) K C - B^T P A`.
    pub e: Mat,
    /// `grad J(K) = 2 E_K Sigma_K C^T`.
    pub grad: Mat,
    /// `grad J(K) L_K^{-1}`.
    pub natural: Mat,
    /// `(R + B^T P B)^{-1} grad J(K) L_K^{-1}`.
    pub gauss_newton: Mat,
    pub grad_norm: f64,
}

pub fn residual(sys: &LtiSystem, k: &Gain, ev: &ClosedLoopEval) -> Mat {
    let bt_p = sys.b().transpose() * &ev.p;
    ev.input_curvature(sys) * k.matrix() * sys.c() - bt_p * sys.a()
}

pub fn gradient(sys: &LtiSystem, k: &Gain, ev: &ClosedLoopEval) -> Result<GradientBundle> {
    let e = residual(sys, k, ev);
    let grad = &e * &ev.sigma * sys.c().transpose() * 2.0;

    let sv = ev.lout.singular_values();
    let ratio = sv.min() / sv.max();
    if !(ratio > OUTPUT_CORRELATION_RCOND) {
        return Err(SofError::IllConditionedOutputCorrelation { ratio });
    }
    let natural = linalg::solve_right_spd(&grad, &ev.lout, "L_K")?;
    let gauss_newton = linalg::solve_left_spd(&ev.input_curvature(sys), &natural, "R + B^T P B")?;
    let grad_norm = grad.norm();
    Ok(GradientBundle {
        e,
        grad,
        natural,
        gauss_newton,
        grad_norm,
    })
}

/// Evaluate and differentiate in one call.
pub fn evaluate_with_gradient(sys: &LtiSystem, k: &Gain) -> Result<(ClosedLoopEval, GradientBundle)> {
    let ev = lyapunov::evaluate(sys, k)?;
    let g = gradient(sys, k, &ev)?;
    Ok((ev, g))
}

/// Directional derivative of `P_K` along `Z`: the solution of
/// `P' = C^T Z^T E_K + E_K^T Z C + A_K^T P' A_K`.
pub fn p_prime(sys: &LtiSystem, k: &Gain, z: &Mat, ev: &ClosedLoopEval) -> Result<Mat> {
    let e = residual(sys, k, ev);
    p_prime_with_residual(sys, z, ev, &e)
}

fn p_prime_with_residual(sys: &LtiSystem, z: &Mat, ev: &ClosedLoopEval, e: &Mat) -> Result<Mat> {
    let zc = z * sys.c();
    let src = zc.transpose() * e + e.transpose() * &zc;
    lyapunov::solve_dlyap_unchecked(&ev.acl, &linalg::symmetrize(&src), true)
}

/// Second directional derivative `d^2/dl^2 J(K + l Z)` at `l = 0`:
/// `Tr(2 (ZC)^T (B^T P B + R) ZC Sigma) - Tr(4 (BZC)^T P'[Z] A_K Sigma)`.
pub fn hessian_quadratic(sys: &LtiSystem, k: &Gain, z: &Mat) -> Result<f64> {
    let ev = lyapunov::evaluate(sys, k)?;
    let e = residual(sys, k, &ev);
    hessian_quadratic_at(sys, &ev, &e, z)
}

pub(crate) fn hessian_quadratic_at(sys: &LtiSystem, ev: &ClosedLoopEval, e: &Mat, z: &Mat) -> Result<f64> {
    let zc = z * sys.c();
    let bzc = sys.b() * &zc;
    let pp = p_prime_with_residual(sys, z, ev, e)?;
    let first = (zc.transpose() * ev.input_curvature(sys) * &zc * &ev.sigma).trace() * 2.0;
    let second = (bzc.transpose() * pp * &ev.acl * &ev.sigma).trace() * 4.0;
    Ok(first - second)
}

/// Hessian of `J` with respect to `vec(K)` (column-major).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HessianMatrix {
    #[serde(skip)]
    pub h: Mat,
    pub min_eig: f64,
    pub max_eig: f64,
}

impl HessianMatrix {
    /// Induced 2-norm (the Hessian is symmetric).
    pub fn norm(&self) -> f64 {
        self.min_eig.abs().max(self.max_eig.abs())
    }
}

fn basis(m: usize, d: usize, idx: usize) -> Mat {
    // column-major index into vec(K)
    let mut z = Mat::zeros(m, d);
    z[(idx % m, idx / m)] = 1.0;
    z
}

/// Assembles the Hessian by polarization of the directional form over the
/// standard basis, then symmetrizes.
pub fn hessian_matrix(sys: &LtiSystem, k: &Gain) -> Result<HessianMatrix> {
    let ev = lyapunov::evaluate(sys, k)?;
    hessian_matrix_at(sys, k, &ev)
}

pub fn hessian_matrix_at(sys: &LtiSystem, k: &Gain, ev: &ClosedLoopEval) -> Result<HessianMatrix> {
    let (m, d) = (sys.m(), sys.d());
    let dim = m * d;
    let e = residual(sys, k, ev);
    let diag: Vec<f64> = (0..dim)
        .map(|i| hessian_quadratic_at(sys, ev, &e, &basis(m, d, i)))
        .collect::<Result<_>>()?;
    let mut h = Mat::zeros(dim, dim);
    for i in 0..dim {
        h[(i, i)] = diag[i];
        for j in (i + 1)..dim {
            let z = basis(m, d, i) + basis(m, d, j);
            let qij = hessian_quadratic_at(sys, ev, &e, &z)?;
            let v = 0.5 * (qij - diag[i] - diag[j]);
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    let h = linalg::symmetrize(&h);
    let ev = linalg::sym_eigenvalues(&h);
    Ok(HessianMatrix {
        min_eig: ev[0],
        max_eig: ev[dim - 1],
        h,
    })
}
