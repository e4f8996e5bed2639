//! Discrete Lyapunov solves, cost evaluation, and the brute-force and
//! Riccati reference computations used to cross-check them.

use nalgebra::{Cholesky, DMatrix};
use serde::Serialize;

use crate::error::{Result, SofError};
use crate::linalg::{self, Mat};
use crate::model::{self, Gain, LtiSystem, StabilityReport};

/// Relative Frobenius residual every Lyapunov solve must meet.
pub const LYAPUNOV_RESIDUAL_TOL: f64 = 1e-10;

/// Closed-loop quantities for one stabilizing gain.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopEval {
    /// `A_K = A - BKC`.
    pub acl: Mat,
    /// Value matrix, `P = Q + C^T K^T R K C + A_K^T P A_K`.
    pub p: Mat,
    /// State correlation, `Sigma = X0 + A_K Sigma A_K^T`.
    pub sigma: Mat,
    /// Output correlation `C Sigma C^T`.
    pub lout: Mat,
    /// `J(K) = Tr(P X0)`.
    pub cost: f64,
    pub stability: StabilityReport,
}

impl ClosedLoopEval {
    /// `R + B^T P_K B`.
    pub fn input_curvature(&self, sys: &LtiSystem) -> Mat {
        sys.r() + sys.b().transpose() * &self.p * sys.b()
    }
}

/// Per-stage cost weight under the gain, `Q + C^T K^T R K C`.
pub fn stage_weight(sys: &LtiSystem, k: &Gain) -> Mat {
    let kc = k.matrix() * sys.c();
    sys.q() + kc.transpose() * sys.r() * kc
}

fn lyapunov_map(acl: &Mat, x: &Mat, transpose_form: bool) -> Mat {
    if transpose_form {
        acl.transpose() * x * acl
    } else {
        acl * x * acl.transpose()
    }
}

/// `a + b` as an unevaluated pair `(sum, error)`.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// `a * b` as an unevaluated pair `(product, error)`.
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// Double-double accumulator.
#[derive(Clone, Copy, Default)]
struct Dd(f64, f64);

impl Dd {
    fn add(self, v: f64) -> Dd {
        let (s, e) = two_sum(self.0, v);
        Dd(s, self.1 + e)
    }

    fn add_prod(self, a: f64, b: f64) -> Dd {
        let (p, e) = two_prod(a, b);
        let mut r = self.add(p);
        r.1 += e;
        r
    }

    fn value(self) -> f64 {
        self.0 + self.1
    }
}

/// `S + Acl^T X Acl - X` (or the dual form) with products and sums carried
/// in double-double, so the refinement step sees the true residual rather
/// than rounding noise.
fn residual_compensated(acl: &Mat, s: &Mat, x: &Mat, transpose_form: bool) -> Mat {
    let n = acl.nrows();
    let a = |i: usize, j: usize| if transpose_form { acl[(j, i)] } else { acl[(i, j)] };
    // Y = X M^T with M = A^T (transpose form) or A, kept as hi + lo.
    let mut y_hi = Mat::zeros(n, n);
    let mut y_lo = Mat::zeros(n, n);
    for k in 0..n {
        for j in 0..n {
            let mut acc = Dd::default();
            for l in 0..n {
                acc = acc.add_prod(x[(k, l)], a(j, l));
            }
            let (hi, lo) = two_sum(acc.0, acc.1);
            y_hi[(k, j)] = hi;
            y_lo[(k, j)] = lo;
        }
    }
    Mat::from_fn(n, n, |i, j| {
        let mut acc = Dd(s[(i, j)], 0.0).add(-x[(i, j)]);
        for k in 0..n {
            acc = acc.add_prod(a(i, k), y_hi[(k, j)]);
            acc.1 += a(i, k) * y_lo[(k, j)];
        }
        acc.value()
    })
}

fn relative_residual(acl: &Mat, s: &Mat, x: &Mat, transpose_form: bool) -> (Mat, f64) {
    let res = residual_compensated(acl, s, x, transpose_form);
    let scale = x.norm().max(f64::MIN_POSITIVE);
    let rel = res.norm() / scale;
    (res, rel)
}

/// Refinement steps applied after the initial LU solve.
const REFINEMENT_STEPS: usize = 2;

/// Solves `X = S + Acl^T X Acl` (`transpose_form = true`) or
/// `X = S + Acl X Acl^T` (`false`) by Kronecker vectorization and dense LU.
pub fn solve_dlyap(acl: &Mat, s: &Mat, transpose_form: bool) -> Result<Mat> {
    let rho = linalg::spectral_radius(acl)?;
    if rho >= 1.0 {
        return Err(SofError::UnstableClosedLoop {
            spectral_radius: rho,
        });
    }
    solve_dlyap_unchecked(acl, s, transpose_form)
}

pub(crate) fn solve_dlyap_unchecked(acl: &Mat, s: &Mat, transpose_form: bool) -> Result<Mat> {
    let n = acl.nrows();
    if acl.ncols() != n || s.nrows() != n || s.ncols() != n {
        return Err(SofError::Dimension {
            field: "S",
            expected_rows: n,
            expected_cols: n,
            rows: s.nrows(),
            cols: s.ncols(),
        });
    }
    // vec(A^T X A) = (A^T (x) A^T) vec(X); vec(A X A^T) = (A (x) A) vec(X).
    let kron = if transpose_form {
        let at = acl.transpose();
        at.kronecker(&at)
    } else {
        acl.kronecker(acl)
    };
    let system = DMatrix::<f64>::identity(n * n, n * n) - kron;
    let lu = system.lu();
    let solve = |rhs: &Mat| -> Result<Mat> {
        let v = lu
            .solve(&linalg::vec_col(rhs))
            .ok_or(SofError::Singular { context: "Lyapunov" })?;
        Ok(linalg::unvec_col(&v, n, n))
    };

    let mut x = linalg::symmetrize(&solve(s)?);
    let (mut res, mut rel) = relative_residual(acl, s, &x, transpose_form);
    for _ in 0..REFINEMENT_STEPS {
        if rel == 0.0 {
            break;
        }
        x = linalg::symmetrize(&(&x + solve(&res)?));
        (res, rel) = relative_residual(acl, s, &x, transpose_form);
    }
    if !(rel <= LYAPUNOV_RESIDUAL_TOL) {
        return Err(SofError::LyapunovResidual { residual: rel });
    }
    Ok(x)
}

/// Doubling iteration `X <- X + A^T X A, A <- A^2` (or the dual form).
/// Independent of the Kronecker route; used to cross-validate it.
pub fn solve_dlyap_doubling(acl: &Mat, s: &Mat, transpose_form: bool) -> Result<Mat> {
    let rho = linalg::spectral_radius(acl)?;
    if rho >= 1.0 {
        return Err(SofError::UnstableClosedLoop {
            spectral_radius: rho,
        });
    }
    let mut x = s.clone();
    let mut a = acl.clone();
    for _ in 0..200 {
        let inc = lyapunov_map(&a, &x, transpose_form);
        x += &inc;
        a = &a * &a;
        if inc.norm() <= f64::EPSILON * x.norm() * 1e-2 || a.norm() == 0.0 {
            return Ok(linalg::symmetrize(&x));
        }
    }
    Err(SofError::Singular {
        context: "Lyapunov doubling iteration",
    })
}

/// Solves both Lyapunov equations and the cost for a stabilizing gain.
pub fn evaluate(sys: &LtiSystem, k: &Gain) -> Result<ClosedLoopEval> {
    let acl = model::closed_loop(sys, k)?;
    let stability = StabilityReport::from_radius(linalg::spectral_radius(&acl)?);
    if !stability.stabilizing {
        return Err(SofError::UnstableClosedLoop {
            spectral_radius: stability.spectral_radius,
        });
    }
    let p = solve_dlyap_unchecked(&acl, &stage_weight(sys, k), true)?;
    let sigma = solve_dlyap_unchecked(&acl, sys.x0(), false)?;
    let lout = linalg::symmetrize(&(sys.c() * &sigma * sys.c().transpose()));
    let cost = (&p * sys.x0()).trace();
    Ok(ClosedLoopEval {
        acl,
        p,
        sigma,
        lout,
        cost,
        stability,
    })
}

/// Convenience: just `J(K)`.
pub fn cost(sys: &LtiSystem, k: &Gain) -> Result<f64> {
    Ok(evaluate(sys, k)?.cost)
}

/// `sum_{t < horizon} Tr(W X_t)` with `X_{t+1} = A_K X_t A_K^T`, `X_0 = X0`,
/// `W = Q + C^T K^T R K C`. Brute-force reference for the cost.
pub fn truncated_cost_oracle(sys: &LtiSystem, k: &Gain, horizon: usize) -> Result<f64> {
    let acl = model::closed_loop(sys, k)?;
    let w = stage_weight(sys, k);
    let mut x = sys.x0().clone();
    let mut total = 0.0;
    for _ in 0..horizon {
        total += (&w * &x).trace();
        x = &acl * x * acl.transpose();
    }
    Ok(total)
}

pub const ORACLE_MAX_STEPS: usize = 1_000_000;

/// Truncated-series cost with an adaptive horizon: stops once a step adds
/// less than `1e-14` of the running sum. Returns the sum and steps used.
pub fn truncated_cost_oracle_adaptive(sys: &LtiSystem, k: &Gain) -> Result<(f64, usize)> {
    let acl = model::closed_loop(sys, k)?;
    let w = stage_weight(sys, k);
    let mut x = sys.x0().clone();
    let mut total = 0.0;
    for step in 1..=ORACLE_MAX_STEPS {
        let inc = (&w * &x).trace();
        total += inc;
        if inc < 1e-14 * total {
            return Ok((total, step));
        }
        x = &acl * x * acl.transpose();
    }
    Ok((total, ORACLE_MAX_STEPS))
}

/// Optimal state-feedback LQR solution for the same plant and weights.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateFeedbackOptimum {
    /// Riccati solution.
    #[serde(skip)]
    pub p: Mat,
    /// `Ks* = (R + B^T P B)^{-1} B^T P A`, an m x n state-feedback gain.
    #[serde(skip)]
    pub gain: Mat,
    /// `Js* = Tr(P X0)`.
    pub cost: f64,
    pub iterations: usize,
}

pub const RICCATI_MAX_ITERS: usize = 100_000;

/// Riccati value iteration from `P = Q` until the relative change drops
/// below `1e-12`.
pub fn dare_state_feedback(sys: &LtiSystem) -> Result<StateFeedbackOptimum> {
    let (a, b, q, r) = (sys.a(), sys.b(), sys.q(), sys.r());
    let at = a.transpose();
    let bt = b.transpose();
    let mut p = q.clone();
    for it in 1..=RICCATI_MAX_ITERS {
        let g = r + &bt * &p * b;
        let chol = Cholesky::new(linalg::symmetrize(&g)).ok_or(SofError::NotPositiveDefinite {
            name: "R + B^T P B",
        })?;
        let btpa = &bt * &p * a;
        let next = linalg::symmetrize(&(q + &at * &p * a - btpa.transpose() * chol.solve(&btpa)));
        if !next.iter().all(|v| v.is_finite()) {
            break;
        }
        let change = (&next - &p).norm();
        p = next;
        if change <= 1e-12 * p.norm() {
            let g = r + &bt * &p * b;
            let gain = linalg::solve_left_spd(&g, &(&bt * &p * a), "R + B^T P B")?;
            let cost = (&p * sys.x0()).trace();
            return Ok(StateFeedbackOptimum {
                p,
                gain,
                cost,
                iterations: it,
            });
        }
    }
    Err(SofError::RiccatiNonConvergence {
        iterations: RICCATI_MAX_ITERS,
    })
}
