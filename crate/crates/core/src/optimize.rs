//! Model-based policy-gradient iterations (vanilla, natural, Gauss-Newton),
//! theoretical budgets, and the local convergence monitor.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SofError};
use crate::gradient::{self, GradientBundle};
use crate::landscape::{self, SystemNorms};
use crate::linalg::{self, Mat};
use crate::lyapunov::{self, ClosedLoopEval};
use crate::model::{Gain, LtiSystem};

pub const DEFAULT_EPSILON: f64 = 1e-8;
pub const DEFAULT_MAX_ITERS: usize = 100_000;
/// Step halvings tried before a run is stopped for non-monotonicity.
pub const MAX_HALVINGS: u32 = 30;
/// A step counts as non-increasing when `J_new <= J_old (1 + MONOTONE_RTOL)`;
/// the slack absorbs rounding once `J` has converged to machine precision.
pub const MONOTONE_RTOL: f64 = 8.0 * f64::EPSILON;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Vanilla,
    Natural,
    GaussNewton,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Vanilla, Method::Natural, Method::GaussNewton];

    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Natural => "natural",
            Method::GaussNewton => "gauss_newton",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "vanilla" => Some(Method::Vanilla),
            "natural" => Some(Method::Natural),
            "gauss_newton" | "gn" => Some(Method::GaussNewton),
            _ => None,
        }
    }

    pub fn direction(self, g: &GradientBundle) -> &Mat {
        match self {
            Method::Vanilla => &g.grad,
            Method::Natural => &g.natural,
            Method::GaussNewton => &g.gauss_newton,
        }
    }

    /// Multiplier `kappa` in the admissible step `eta <= kappa / L`:
    /// `1`, `mu sigma_min(C)^2` and `mu sigma_min(R) sigma_min(C)^2`.
    pub fn step_factor(self, mu: f64, sigma_min_c: f64, sigma_min_r: f64) -> f64 {
        match self {
            Method::Vanilla => 1.0,
            Method::Natural => mu * sigma_min_c * sigma_min_c,
            Method::GaussNewton => mu * sigma_min_r * sigma_min_c * sigma_min_c,
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSize {
    Fixed(f64),
    /// Largest step the convergence guarantee admits, from `L` at `alpha = J(K0)`.
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub method: Method,
    pub step_size: StepSize,
    pub epsilon: f64,
    pub max_iters: usize,
    pub enforce_monotone: bool,
}

impl OptimizerConfig {
    pub fn new(method: Method, step_size: StepSize) -> Self {
        Self {
            method,
            step_size,
            epsilon: DEFAULT_EPSILON,
            max_iters: DEFAULT_MAX_ITERS,
            enforce_monotone: true,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn with_monotone(mut self, enforce: bool) -> Self {
        self.enforce_monotone = enforce;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let StepSize::Fixed(eta) = self.step_size {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(SofError::InvalidArgument(format!(
                    "step size must be positive and finite, got {eta}"
                )));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(SofError::InvalidArgument(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Admissible step size for `method` on the sublevel set at `alpha`.
pub fn auto_step(sys: &LtiSystem, method: Method, alpha: f64) -> Result<f64> {
    let norms = SystemNorms::of(sys)?;
    let (l, _) = norms.smoothness(alpha);
    let kappa = method.step_factor(norms.mu, linalg::sigma_min(sys.c()), norms.sigma_min_r);
    Ok(kappa / l)
}

/// Per-step decrease constant `c` in `J(K_{i+1}) <= J(K_i) - c ||D_i||_F^2`,
/// valid when `eta` is within the method's admissible range.
pub fn descent_constant(sys: &LtiSystem, method: Method, eta: f64) -> f64 {
    let kappa = method.step_factor(
        sys.mu(),
        linalg::sigma_min(sys.c()),
        linalg::sigma_min(sys.r()),
    );
    eta * kappa / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelFreeStats {
    pub grad_hat_norm: f64,
    pub divergent_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterRecord {
    pub iter: usize,
    /// Gain entries, row-major.
    pub k: Vec<f64>,
    pub j: f64,
    pub grad_norm: f64,
    pub method_grad_norm: f64,
    pub rho: f64,
    /// Step actually applied to reach this iterate (0 for the initial gain).
    pub eta_used: f64,
    pub halvings: u32,
    /// Seconds since the run started. Excluded from CSV output.
    pub elapsed: f64,
    pub model_free: Option<ModelFreeStats>,
}

impl IterRecord {
    pub fn gain(&self, rows: usize, cols: usize) -> Gain {
        Gain::from_row_slice(rows, cols, &self.k).expect("logged gains are finite")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Stationary,
    MaxIters,
    MonotonicityViolation,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunLog {
    pub method: Method,
    /// Base step size (after resolving `auto`).
    pub eta: f64,
    pub epsilon: f64,
    pub gain_shape: (usize, usize),
    pub records: Vec<IterRecord>,
    pub terminated_by: Termination,
    pub theoretical_budget: Option<u64>,
    pub seed: Option<u64>,
}

impl RunLog {
    pub fn last(&self) -> &IterRecord {
        self.records.last().expect("a run log always has the initial record")
    }

    pub fn final_gain(&self) -> Gain {
        let (r, c) = self.gain_shape;
        self.last().gain(r, c)
    }

    pub fn gain_at(&self, i: usize) -> Gain {
        let (r, c) = self.gain_shape;
        self.records[i].gain(r, c)
    }

    pub fn iterations(&self) -> usize {
        self.records.len() - 1
    }

    /// Equality ignoring wall-clock timings.
    pub fn same_trajectory(&self, other: &RunLog) -> bool {
        let strip = |r: &IterRecord| IterRecord {
            elapsed: 0.0,
            ..r.clone()
        };
        self.method == other.method
            && self.eta == other.eta
            && self.gain_shape == other.gain_shape
            && self.terminated_by == other.terminated_by
            && self.theoretical_budget == other.theoretical_budget
            && self.seed == other.seed
            && self.records.len() == other.records.len()
            && self
                .records
                .iter()
                .zip(&other.records)
                .all(|(a, b)| strip(a) == strip(b))
    }

    /// CSV with 17 significant digits per float. Model-free runs append
    /// `grad_hat_norm, divergent_count, seed`.
    pub fn to_csv(&self) -> String {
        let model_free = self.records.iter().any(|r| r.model_free.is_some());
        let (rows, cols) = self.gain_shape;
        let mut out = String::from("iter,J,grad_norm,method_grad_norm,rho,eta_used");
        for i in 0..rows {
            for j in 0..cols {
                let _ = write!(out, ",k_{}_{}", i + 1, j + 1);
            }
        }
        if model_free {
            out.push_str(",grad_hat_norm,divergent_count,seed");
        }
        out.push('\n');
        for r in &self.records {
            let _ = write!(
                out,
                "{},{},{},{},{},{}",
                r.iter,
                fmt_f64(r.j),
                fmt_f64(r.grad_norm),
                fmt_f64(r.method_grad_norm),
                fmt_f64(r.rho),
                fmt_f64(r.eta_used)
            );
            for v in &r.k {
                let _ = write!(out, ",{}", fmt_f64(*v));
            }
            if model_free {
                let (g, dcount) = r
                    .model_free
                    .map(|s| (fmt_f64(s.grad_hat_norm), s.divergent_count.to_string()))
                    .unwrap_or_default();
                let seed = self.seed.map(|s| s.to_string()).unwrap_or_default();
                let _ = write!(out, ",{g},{dcount},{seed}");
            }
            out.push('\n');
        }
        out
    }
}

/// Scientific notation with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Stepwise driver. [`run`] collects every record; long runs can call
/// [`Optimizer::step`] directly and keep only what they need.
pub struct Optimizer<'a> {
    sys: &'a LtiSystem,
    cfg: OptimizerConfig,
    eta: f64,
    k: Gain,
    ev: ClosedLoopEval,
    grad: GradientBundle,
    iter: usize,
    start: Instant,
    finished: Option<Termination>,
}

impl<'a> Optimizer<'a> {
    pub fn new(sys: &'a LtiSystem, k0: &Gain, cfg: OptimizerConfig) -> Result<Self> {
        cfg.validate()?;
        let start = Instant::now();
        let (ev, grad) = gradient::evaluate_with_gradient(sys, k0)?;
        let eta = match cfg.step_size {
            StepSize::Fixed(eta) => eta,
            StepSize::Auto => auto_step(sys, cfg.method, ev.cost)?,
        };
        Ok(Self {
            sys,
            cfg,
            eta,
            k: k0.clone(),
            ev,
            grad,
            iter: 0,
            start,
            finished: None,
        })
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn gain(&self) -> &Gain {
        &self.k
    }

    pub fn eval(&self) -> &ClosedLoopEval {
        &self.ev
    }

    pub fn gradient(&self) -> &GradientBundle {
        &self.grad
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn method_grad_norm(&self) -> f64 {
        self.cfg.method.direction(&self.grad).norm()
    }

    pub fn termination(&self) -> Option<Termination> {
        self.finished
    }

    pub fn record(&self, eta_used: f64, halvings: u32) -> IterRecord {
        IterRecord {
            iter: self.iter,
            k: linalg::flatten_row_major(self.k.matrix()),
            j: self.ev.cost,
            grad_norm: self.grad.grad_norm,
            method_grad_norm: self.method_grad_norm(),
            rho: self.ev.stability.spectral_radius,
            eta_used,
            halvings,
            elapsed: self.start.elapsed().as_secs_f64(),
            model_free: None,
        }
    }

    /// Checks the stopping rules and, if none fires, takes one step.
    /// Returns the accepted step and number of halvings, or `None` once the
    /// run has terminated.
    pub fn step(&mut self) -> Result<Option<(f64, u32)>> {
        if self.finished.is_some() {
            return Ok(None);
        }
        if self.method_grad_norm() <= self.cfg.epsilon {
            self.finished = Some(Termination::Stationary);
            return Ok(None);
        }
        if self.iter >= self.cfg.max_iters {
            self.finished = Some(Termination::MaxIters);
            return Ok(None);
        }
        let dir = self.cfg.method.direction(&self.grad).clone();
        let j_old = self.ev.cost;
        let mut eta = self.eta;
        for halvings in 0..=MAX_HALVINGS {
            let cand = self.k.step(&dir, eta)?;
            let accepted = match gradient::evaluate_with_gradient(self.sys, &cand) {
                Ok((ev, g)) if !self.cfg.enforce_monotone || ev.cost <= j_old * (1.0 + MONOTONE_RTOL) => {
                    Some((ev, g))
                }
                Ok(_) => None,
                Err(SofError::UnstableClosedLoop { spectral_radius }) => {
                    if !self.cfg.enforce_monotone {
                        return Err(SofError::UnstableIterate {
                            iteration: self.iter + 1,
                            spectral_radius,
                            gain: linalg::flatten_row_major(cand.matrix()),
                        });
                    }
                    None
                }
                Err(e) => return Err(e),
            };
            if let Some((ev, g)) = accepted {
                self.k = cand;
                self.ev = ev;
                self.grad = g;
                self.iter += 1;
                return Ok(Some((eta, halvings)));
            }
            eta *= 0.5;
        }
        self.finished = Some(Termination::MonotonicityViolation);
        Ok(None)
    }
}

/// Runs `cfg.method` from `k0` until `||D|| <= epsilon`, `max_iters`, or a
/// step that cannot be made non-increasing.
pub fn run(sys: &LtiSystem, k0: &Gain, cfg: OptimizerConfig) -> Result<RunLog> {
    let mut opt = Optimizer::new(sys, k0, cfg)?;
    let alpha = opt.eval().cost;
    let mut records = vec![opt.record(0.0, 0)];
    while let Some((eta, halvings)) = opt.step()? {
        records.push(opt.record(eta, halvings));
    }
    let theoretical_budget = budget_for(sys, cfg.method, opt.eta(), alpha, cfg.epsilon);
    Ok(RunLog {
        method: cfg.method,
        eta: opt.eta(),
        epsilon: cfg.epsilon,
        gain_shape: (k0.rows(), k0.cols()),
        records,
        terminated_by: opt.termination().expect("loop exits only on termination"),
        theoretical_budget,
        seed: None,
    })
}

/// `None` when the constants are unavailable or `eta` exceeds the admissible
/// step, since the guarantee does not cover that case.
fn budget_for(sys: &LtiSystem, method: Method, eta: f64, alpha: f64, epsilon: f64) -> Option<u64> {
    let norms = SystemNorms::of(sys).ok()?;
    let admissible = auto_step(sys, method, alpha).ok()?;
    if eta > admissible * (1.0 + 1e-12) {
        return None;
    }
    Some(iteration_budget(
        method,
        eta,
        alpha,
        epsilon,
        norms.mu,
        linalg::sigma_min(sys.c()),
        norms.sigma_min_r,
    ))
}

/// `ceil(2 alpha / (eta kappa epsilon^2))` with `kappa` from
/// [`Method::step_factor`].
pub fn iteration_budget(
    method: Method,
    eta: f64,
    alpha: f64,
    epsilon: f64,
    mu: f64,
    sigma_min_c: f64,
    sigma_min_r: f64,
) -> u64 {
    let kappa = method.step_factor(mu, sigma_min_c, sigma_min_r);
    let raw = 2.0 * alpha / (eta * kappa * epsilon * epsilon);
    raw.ceil() as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinearRateBudget {
    /// `N = coefficient * log(gap0 / epsilon_J)`.
    pub coefficient: f64,
    pub raw: f64,
    pub iterations: u64,
}

/// Iterations after which `J(K_N) - J_s* <= epsilon_J` is guaranteed when
/// `C` is square and full rank.
pub fn linear_rate_budget(
    sys: &LtiSystem,
    method: Method,
    eta: f64,
    sigma_kstar_norm: f64,
    gap0: f64,
    epsilon_j: f64,
) -> Result<LinearRateBudget> {
    if !landscape::c_is_square_full_rank(sys) {
        return Err(SofError::RankDeficientC {
            rank: linalg::numerical_rank(sys.c()),
            n: sys.n(),
            d: sys.d(),
        });
    }
    if !(eta > 0.0 && sigma_kstar_norm > 0.0 && epsilon_j > 0.0 && gap0 >= 0.0) {
        return Err(SofError::InvalidArgument(
            "linear-rate budget needs positive eta, ||Sigma_K*||, epsilon_J".into(),
        ));
    }
    let mu = sys.mu();
    let sc = linalg::sigma_min(sys.c());
    let sr = linalg::sigma_min(sys.r());
    let rate = match method {
        Method::Vanilla => mu * mu * sc * sc * sr,
        Method::Natural => mu * sr,
        Method::GaussNewton => mu,
    };
    let coefficient = sigma_kstar_norm / (2.0 * eta * rate);
    let raw = coefficient * (gap0 / epsilon_j).ln().max(0.0);
    Ok(LinearRateBudget {
        coefficient,
        raw,
        iterations: raw.ceil() as u64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnvelopePoint {
    pub iter: usize,
    pub error: f64,
    pub bound: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonitorReport {
    /// Smallest Hessian eigenvalue at the reference minimum.
    pub l: f64,
    pub r_bar: f64,
    pub r0: f64,
    pub eta: f64,
    pub points: Vec<EnvelopePoint>,
    pub passed: bool,
}

/// Checks `||K_i - K#|| <= (r_bar r0 / (r_bar - r0)) (1 + eta l)^{-i}` along
/// `run`, with `r_bar = 2 l / M`.
pub fn local_convergence_monitor(
    sys: &LtiSystem,
    k_hash: &Gain,
    run: &RunLog,
    m: f64,
) -> Result<MonitorReport> {
    let h = gradient::hessian_matrix(sys, k_hash)?;
    let l = h.min_eig;
    if !(l > 0.0) {
        return Err(SofError::NotALocalMinimum { l });
    }
    let r_bar = 2.0 * l / m;
    let r0 = run.gain_at(0).distance(k_hash);
    if r0 >= r_bar {
        return Err(SofError::OutsideBasin { r0, r_bar });
    }
    let scale = r_bar * r0 / (r_bar - r0);
    let contraction = 1.0 / (1.0 + run.eta * l);
    let points: Vec<EnvelopePoint> = run
        .records
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            let error = rec.gain(run.gain_shape.0, run.gain_shape.1).distance(k_hash);
            let bound = scale * contraction.powi(i as i32);
            EnvelopePoint {
                iter: rec.iter,
                error,
                bound,
                holds: error <= bound,
            }
        })
        .collect();
    let passed = points.iter().all(|p| p.holds);
    Ok(MonitorReport {
        l,
        r_bar,
        r0,
        eta: run.eta,
        points,
        passed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityReport {
    pub ka: Vec<f64>,
    pub kb: Vec<f64>,
    pub distance: f64,
    /// `10 epsilon / l`, with `l` the smaller Hessian eigenvalue at the two
    /// endpoints (`10 epsilon` if either is not positive).
    pub threshold: f64,
    pub differ: bool,
    pub e_norm_a: f64,
    pub e_norm_b: f64,
    pub terminated_a: Termination,
    pub terminated_b: Termination,
}

/// Runs `cfg` to stationarity from `k0` under two initial-state covariances
/// and compares the limits.
pub fn stationarity_sensitivity(
    sys: &LtiSystem,
    k0: &Gain,
    x0_a: &Mat,
    x0_b: &Mat,
    cfg: OptimizerConfig,
) -> Result<SensitivityReport> {
    let sys_a = sys.with_x0(x0_a.clone())?;
    let sys_b = sys.with_x0(x0_b.clone())?;
    let (run_a, run_b) = rayon::join(|| run(&sys_a, k0, cfg), || run(&sys_b, k0, cfg));
    let (run_a, run_b) = (run_a?, run_b?);
    let (ka, kb) = (run_a.final_gain(), run_b.final_gain());

    let curvature = |s: &LtiSystem, k: &Gain| gradient::hessian_matrix(s, k).map(|h| h.min_eig);
    let l = curvature(&sys_a, &ka)?.min(curvature(&sys_b, &kb)?);
    let threshold = if l > 0.0 {
        10.0 * cfg.epsilon / l
    } else {
        10.0 * cfg.epsilon
    };
    let e_norm = |s: &LtiSystem, k: &Gain| -> Result<f64> {
        let ev = lyapunov::evaluate(s, k)?;
        Ok(gradient::residual(s, k, &ev).norm())
    };
    let distance = ka.distance(&kb);
    Ok(SensitivityReport {
        ka: linalg::flatten_row_major(ka.matrix()),
        kb: linalg::flatten_row_major(kb.matrix()),
        distance,
        threshold,
        differ: distance > threshold,
        e_norm_a: e_norm(&sys_a, &ka)?,
        e_norm_b: e_norm(&sys_b, &kb)?,
        terminated_a: run_a.terminated_by,
        terminated_b: run_b.terminated_by,
    })
}
