//! Landscape constants on a sublevel set `{K : J(K) <= alpha}` and the
//! sampled certificates that check the proven inequalities numerically.
//!
//! All closed forms are evaluated from [`SystemNorms`], so a logged set of
//! inputs reproduces the constants exactly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Result, SofError};
use crate::gradient::{self, HessianMatrix};
use crate::linalg::{self, Mat};
use crate::lyapunov::{self, ClosedLoopEval};
use crate::model::{Gain, LtiSystem};

/// Inflation applied to the sampled maximum of `||A_K||`.
pub const GAMMA_SAFETY_FACTOR: f64 = 1.05;

/// Scalar summaries of the system that every closed form depends on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SystemNorms {
    pub mu: f64,
    pub sigma_min_q: f64,
    pub sigma_min_r: f64,
    pub norm_a: f64,
    pub norm_b: f64,
    pub norm_c: f64,
    pub norm_r: f64,
    pub m: usize,
    pub d: usize,
}

impl SystemNorms {
    /// Fails with `ConstantsUnavailable` when `Q`, `R` or `X0` is not
    /// positive definite, since the bounds divide by their smallest
    /// eigenvalues.
    pub fn of(sys: &LtiSystem) -> Result<Self> {
        for (name, mat) in [("Q", sys.q()), ("R", sys.r()), ("X0", sys.x0())] {
            if !linalg::is_positive_definite(mat) {
                return Err(SofError::ConstantsUnavailable {
                    reason: format!("{name} is not positive definite (sigma_min({name}) = 0)"),
                });
            }
        }
        Ok(Self {
            mu: sys.mu(),
            sigma_min_q: linalg::sigma_min(sys.q()),
            sigma_min_r: linalg::sigma_min(sys.r()),
            norm_a: linalg::spectral_norm(sys.a()),
            norm_b: linalg::spectral_norm(sys.b()),
            norm_c: linalg::spectral_norm(sys.c()),
            norm_r: linalg::spectral_norm(sys.r()),
            m: sys.m(),
            d: sys.d(),
        })
    }

    pub fn zeta1(&self, alpha: f64) -> f64 {
        let (b, c) = (self.norm_b, self.norm_c);
        ((alpha / self.mu) * (1.0 + b * b * c * c) + self.norm_r * c * c) / self.sigma_min_q - 1.0
    }

    /// Bound on the Hessian norm over the sublevel set; returns `(L, zeta1)`.
    pub fn smoothness(&self, alpha: f64) -> (f64, f64) {
        let (b, c) = (self.norm_b, self.norm_c);
        let z1 = self.zeta1(alpha);
        let l = 2.0 * alpha / self.sigma_min_q
            * (self.norm_r + alpha / self.mu * (1.0 + 2.0 * z1 / (b * c)) * b * b)
            * c
            * c;
        (l, z1)
    }

    /// Bound on `||KC||` over the sublevel set.
    pub fn psi(&self, alpha: f64) -> f64 {
        let (b, mu, sr) = (self.norm_b, self.mu, self.sigma_min_r);
        (self.norm_r * alpha + b * b * alpha * alpha / mu).sqrt() / (mu.sqrt() * sr)
            + b * self.norm_a * alpha / (mu * sr)
    }

    /// Hessian Lipschitz constant; returns `(M, zeta2, zeta3, zeta4)`.
    pub fn hessian_lipschitz(&self, alpha: f64, gamma: f64, psi: f64) -> (f64, f64, f64, f64) {
        let (b, c, r, mu, sq) = (
            self.norm_b,
            self.norm_c,
            self.norm_r,
            self.mu,
            self.sigma_min_q,
        );
        let z1 = self.zeta1(alpha);
        let pre = 2.0 * c / sq;
        let z2 = pre * (alpha * gamma / mu * b + psi * r);
        let z3 = pre * (alpha / mu * (z1 * gamma + z2 * gamma + b * c) * b + r * c);
        let z4 = pre * (alpha / mu * (z1 * gamma + b * c) * b + r * c);
        let dim = ((self.m * self.d) as f64).sqrt();
        let m = 4.0 * alpha * alpha * dim / (mu * sq)
            * ((z1 + z2 / 2.0) * b * c + z3 + z4 / 2.0)
            * b
            * c;
        (m, z2, z3, z4)
    }
}

/// `(L, zeta1)` for the sublevel set at `alpha`.
pub fn smoothness_constant(sys: &LtiSystem, alpha: f64) -> Result<(f64, f64)> {
    check_alpha(alpha)?;
    Ok(SystemNorms::of(sys)?.smoothness(alpha))
}

pub fn psi_bound(sys: &LtiSystem, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(SystemNorms::of(sys)?.psi(alpha))
}

/// `(M, zeta2, zeta3, zeta4)`.
pub fn hessian_lipschitz_constant(
    sys: &LtiSystem,
    alpha: f64,
    gamma: f64,
    psi: f64,
) -> Result<(f64, f64, f64, f64)> {
    check_alpha(alpha)?;
    if !(gamma > 0.0 && psi > 0.0) {
        return Err(SofError::InvalidArgument(
            "gamma and psi must be positive".into(),
        ));
    }
    Ok(SystemNorms::of(sys)?.hessian_lipschitz(alpha, gamma, psi))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(SofError::InvalidArgument(format!(
            "sublevel value must be positive, got {alpha}"
        )))
    }
}

/// Draws gains from `{K stabilizing : J(K) <= alpha}` with Gaussian
/// proposals around a fixed center. The proposal radius grows after an
/// accepted draw and shrinks after a rejection.
pub struct SublevelSampler<'a> {
    sys: &'a LtiSystem,
    alpha: f64,
    center: Mat,
    radius: f64,
    rng: ChaCha8Rng,
    proposals: usize,
}

/// Consecutive rejections tolerated before giving up.
pub const MAX_CONSECUTIVE_REJECTIONS: usize = 10_000;

impl<'a> SublevelSampler<'a> {
    pub fn new(sys: &'a LtiSystem, alpha: f64, center: &Gain, seed: u64) -> Self {
        let radius = 0.1 * center.matrix().norm().max(1.0);
        Self {
            sys,
            alpha,
            center: center.matrix().clone(),
            radius,
            rng: ChaCha8Rng::seed_from_u64(seed),
            proposals: 0,
        }
    }

    pub fn proposals(&self) -> usize {
        self.proposals
    }

    fn propose(&mut self) -> Result<Gain> {
        let (r, c) = self.center.shape();
        let noise = Mat::from_fn(r, c, |_, _| StandardNormal.sample(&mut self.rng));
        Gain::new(&self.center + noise * self.radius)
    }

    pub fn contains(&self, k: &Gain) -> Option<ClosedLoopEval> {
        match lyapunov::evaluate(self.sys, k) {
            Ok(ev) if ev.cost <= self.alpha => Some(ev),
            _ => None,
        }
    }

    pub fn draw(&mut self) -> Result<(Gain, ClosedLoopEval)> {
        for _ in 0..MAX_CONSECUTIVE_REJECTIONS {
            self.proposals += 1;
            let k = self.propose()?;
            if let Some(ev) = self.contains(&k) {
                self.radius *= 1.1;
                return Ok((k, ev));
            }
            self.radius = (self.radius * 0.95).max(1e-12);
        }
        Err(SofError::SamplingFailed {
            attempts: MAX_CONSECUTIVE_REJECTIONS,
        })
    }

    pub fn draw_many(&mut self, count: usize) -> Result<Vec<(Gain, ClosedLoopEval)>> {
        (0..count).map(|_| self.draw()).collect()
    }
}

/// Sampled estimate of `max_{K in K_alpha} ||A_K||`, inflated by
/// [`GAMMA_SAFETY_FACTOR`]. The seed gain counts as the first sample.
pub fn gamma_estimate(
    sys: &LtiSystem,
    alpha: f64,
    seed_gain: &Gain,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    check_alpha(alpha)?;
    if samples == 0 {
        return Err(SofError::InvalidArgument("samples must be positive".into()));
    }
    let mut sampler = SublevelSampler::new(sys, alpha, seed_gain, seed);
    let first = sampler.contains(seed_gain).ok_or_else(|| {
        SofError::InvalidArgument("seed gain is not inside the sublevel set".into())
    })?;
    let mut best = linalg::spectral_norm(&first.acl);
    for _ in 1..samples {
        let (_, ev) = sampler.draw()?;
        best = best.max(linalg::spectral_norm(&ev.acl));
    }
    Ok(best * GAMMA_SAFETY_FACTOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaProvenance {
    Sampled,
    UserSupplied,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaSource {
    Sampled {
        seed_gain_cost: f64,
        samples: usize,
        seed: u64,
    },
    UserSupplied(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LandscapeConstants {
    pub alpha: f64,
    pub mu: f64,
    /// Smoothness constant `L`.
    pub l: f64,
    pub zeta1: f64,
    pub zeta2: f64,
    pub zeta3: f64,
    pub zeta4: f64,
    pub psi: f64,
    pub gamma: f64,
    /// Hessian Lipschitz constant `M`.
    pub m: f64,
    pub gamma_provenance: GammaProvenance,
    pub inputs: SystemNorms,
}

impl LandscapeConstants {
    pub fn from_norms(
        inputs: SystemNorms,
        alpha: f64,
        gamma: f64,
        gamma_provenance: GammaProvenance,
    ) -> Self {
        let (l, zeta1) = inputs.smoothness(alpha);
        let psi = inputs.psi(alpha);
        let (m, zeta2, zeta3, zeta4) = inputs.hessian_lipschitz(alpha, gamma, psi);
        Self {
            alpha,
            mu: inputs.mu,
            l,
            zeta1,
            zeta2,
            zeta3,
            zeta4,
            psi,
            gamma,
            m,
            gamma_provenance,
            inputs,
        }
    }

    /// All constants for the sublevel set at `alpha`. With sampled `gamma`,
    /// `seed_gain` must lie in the set.
    pub fn compute(
        sys: &LtiSystem,
        alpha: f64,
        seed_gain: &Gain,
        gamma: GammaSource,
    ) -> Result<Self> {
        check_alpha(alpha)?;
        let norms = SystemNorms::of(sys)?;
        let (gamma, provenance) = match gamma {
            GammaSource::UserSupplied(g) if g > 0.0 => (g, GammaProvenance::UserSupplied),
            GammaSource::UserSupplied(g) => {
                return Err(SofError::InvalidArgument(format!(
                    "gamma must be positive, got {g}"
                )))
            }
            GammaSource::Sampled { samples, seed, .. } => (
                gamma_estimate(sys, alpha, seed_gain, samples, seed)?,
                GammaProvenance::Sampled,
            ),
        };
        Ok(Self::from_norms(norms, alpha, gamma, provenance))
    }

    pub fn all_positive_finite(&self) -> bool {
        [
            self.alpha, self.mu, self.l, self.zeta1, self.zeta2, self.zeta3, self.zeta4,
            self.psi, self.gamma, self.m,
        ]
        .iter()
        .all(|v| v.is_finite() && *v > 0.0)
    }
}

/// True when `C` is square with full rank, the setting of the gradient
/// dominance bounds.
pub fn c_is_square_full_rank(sys: &LtiSystem) -> bool {
    sys.d() == sys.n() && linalg::numerical_rank(sys.c()) == sys.n()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DominanceReport {
    /// `||Sigma_K*|| ||grad J||_F^2 / (4 mu^2 sigma_min(C)^2 sigma_min(R))`.
    pub gap_upper_fullrank: Option<f64>,
    /// `mu Tr(E^T E) / ||R + B^T P B||`.
    pub gap_lower_fullrank: Option<f64>,
    /// `||Sigma_Kref|| Tr(E^T (R + B^T P B)^{-1} E)`.
    pub gap_upper_rankdef: f64,
    pub j_of_k: f64,
    pub js_star: Option<f64>,
    pub j_ref: f64,
    pub sigma_kstar_norm: f64,
}

impl DominanceReport {
    /// Checks every emitted inequality, allowing `rel_slack * J(K)` for
    /// rounding.
    pub fn holds(&self, rel_slack: f64) -> bool {
        let slack = rel_slack * self.j_of_k.abs();
        let rankdef = self.j_of_k - self.j_ref <= self.gap_upper_rankdef + slack;
        let full = match (self.js_star, self.gap_lower_fullrank, self.gap_upper_fullrank) {
            (Some(js), Some(lo), Some(hi)) => {
                let gap = self.j_of_k - js;
                lo <= gap + slack && gap <= hi + slack
            }
            _ => true,
        };
        rankdef && full
    }
}

/// Gradient dominance bounds at `K`, with `Kref` playing the optimum's role
/// for `Sigma_K*`.
pub fn dominance_report(sys: &LtiSystem, k: &Gain, kref: &Gain) -> Result<DominanceReport> {
    let (ev, g) = gradient::evaluate_with_gradient(sys, k)?;
    let ev_ref = lyapunov::evaluate(sys, kref)?;
    let sigma_kstar_norm = linalg::spectral_norm(&ev_ref.sigma);
    let curvature = ev.input_curvature(sys);
    let rankdef_trace = (g.e.transpose() * linalg::solve_left_spd(&curvature, &g.e, "R + B^T P B")?)
        .trace();

    let (upper, lower, js) = if c_is_square_full_rank(sys) {
        let mu = sys.mu();
        let smin_c = linalg::sigma_min(sys.c());
        let smin_r = linalg::sigma_min(sys.r());
        let js = lyapunov::dare_state_feedback(sys)?.cost;
        let upper = sigma_kstar_norm * g.grad_norm.powi(2)
            / (4.0 * mu * mu * smin_c * smin_c * smin_r);
        let lower = mu * (g.e.transpose() * &g.e).trace() / linalg::spectral_norm(&curvature);
        (Some(upper), Some(lower), Some(js))
    } else {
        (None, None, None)
    };

    Ok(DominanceReport {
        gap_upper_fullrank: upper,
        gap_lower_fullrank: lower,
        gap_upper_rankdef: sigma_kstar_norm * rankdef_trace,
        j_of_k: ev.cost,
        js_star: js,
        j_ref: ev_ref.cost,
        sigma_kstar_norm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceBounds {
    pub pk_bound_ok: bool,
    pub sigma_bound_ok: bool,
    pub p_norm: f64,
    pub j_over_mu: f64,
    pub sigma_trace: f64,
    pub j_over_sigma_min_q: f64,
}

/// `||P_K|| <= J(K)/mu` and `Tr(Sigma_K) <= J(K)/sigma_min(Q)`.
pub fn trace_bounds(sys: &LtiSystem, k: &Gain) -> Result<TraceBounds> {
    let norms = SystemNorms::of(sys)?;
    let ev = lyapunov::evaluate(sys, k)?;
    let p_norm = linalg::spectral_norm(&ev.p);
    let j_over_mu = ev.cost / norms.mu;
    let sigma_trace = ev.sigma.trace();
    let j_over_sigma_min_q = ev.cost / norms.sigma_min_q;
    // equality is attained in the scalar case; allow rounding
    let tol = 1e-12;
    Ok(TraceBounds {
        pk_bound_ok: p_norm <= j_over_mu * (1.0 + tol),
        sigma_bound_ok: sigma_trace <= j_over_sigma_min_q * (1.0 + tol),
        p_norm,
        j_over_mu,
        sigma_trace,
        j_over_sigma_min_q,
    })
}

/// `2 Tr(Sigma_K' D^T E_K) + Tr(Sigma_K' D^T (R + B^T P_K B) D)` with
/// `D = K'C - KC`; equals `J(K') - J(K)` exactly.
pub fn performance_difference(sys: &LtiSystem, k: &Gain, kp: &Gain) -> Result<f64> {
    let ev = lyapunov::evaluate(sys, k)?;
    let ev_p = lyapunov::evaluate(sys, kp)?;
    let e = gradient::residual(sys, k, &ev);
    let delta = (kp.matrix() - k.matrix()) * sys.c();
    let linear = (&ev_p.sigma * delta.transpose() * &e).trace() * 2.0;
    let quad = (&ev_p.sigma * delta.transpose() * ev.input_curvature(sys) * &delta).trace();
    Ok(linear + quad)
}

/// Outcome of one sampled certificate: the worst observed ratio of the
/// left side to the proven bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Certificate {
    pub name: String,
    pub samples: usize,
    pub worst_ratio: f64,
    pub passed: bool,
}

impl Certificate {
    fn from_ratios(name: &str, ratios: &[f64]) -> Self {
        let worst = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self {
            name: name.to_string(),
            samples: ratios.len(),
            worst_ratio: worst,
            passed: !ratios.is_empty() && ratios.iter().all(|r| *r <= 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CertificateSuite {
    pub constants: LandscapeConstants,
    pub certificates: Vec<Certificate>,
}

impl CertificateSuite {
    pub fn all_passed(&self) -> bool {
        self.certificates.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&Certificate> {
        self.certificates.iter().find(|c| c.name == name)
    }
}

/// Interior points checked when verifying that a segment stays in the set.
pub const SEGMENT_CHECKS: usize = 9;

/// True if `J <= alpha` at the `SEGMENT_CHECKS` evenly spaced interior
/// points of `[k, kp]`.
pub fn segment_in_set(sampler: &SublevelSampler<'_>, k: &Gain, kp: &Gain) -> bool {
    (1..=SEGMENT_CHECKS).all(|i| {
        let t = i as f64 / (SEGMENT_CHECKS + 1) as f64;
        Gain::new(k.matrix() * (1.0 - t) + kp.matrix() * t)
            .ok()
            .and_then(|g| sampler.contains(&g))
            .is_some()
    })
}

/// Runs every sampled certificate on `count` gains (and `count` pairs)
/// from the sublevel set at `alpha`, which must contain `k0`.
///
/// Certificates: trace bounds, `||KC|| <= psi`, `||hess J|| <= L`, the
/// Hessian Lipschitz inequality, the rank-deficient dominance bound, and
/// (square full-rank `C` only) the two full-rank dominance bounds.
pub fn certify(
    sys: &LtiSystem,
    k0: &Gain,
    alpha: f64,
    count: usize,
    gamma_samples: usize,
    seed: u64,
) -> Result<CertificateSuite> {
    if lyapunov::cost(sys, k0)? > alpha {
        return Err(SofError::InvalidArgument(
            "seed gain is not inside the sublevel set".into(),
        ));
    }
    let constants = LandscapeConstants::compute(
        sys,
        alpha,
        k0,
        GammaSource::Sampled {
            seed_gain_cost: alpha,
            samples: gamma_samples,
            seed,
        },
    )?;
    let mut sampler = SublevelSampler::new(sys, alpha, k0, seed.wrapping_add(1));
    let gains = sampler.draw_many(count)?;

    let mut trace_p = Vec::new();
    let mut trace_s = Vec::new();
    let mut psi = Vec::new();
    let mut smooth = Vec::new();
    let mut hessians: Vec<HessianMatrix> = Vec::new();
    for (k, ev) in &gains {
        let tb = trace_bounds(sys, k)?;
        trace_p.push(tb.p_norm / tb.j_over_mu);
        trace_s.push(tb.sigma_trace / tb.j_over_sigma_min_q);
        psi.push(linalg::spectral_norm(&(k.matrix() * sys.c())) / constants.psi);
        let h = gradient::hessian_matrix_at(sys, k, ev)?;
        smooth.push(h.norm() / constants.l);
        hessians.push(h);
    }

    // Pairs whose connecting segment stays inside the set.
    let mut lipschitz = Vec::new();
    let mut i = 0usize;
    let mut attempts = 0usize;
    while lipschitz.len() < count && attempts < 50 * count.max(1) {
        attempts += 1;
        let a = i % gains.len();
        let (kb, evb) = sampler.draw()?;
        i += 1;
        let ka = &gains[a].0;
        let dist = ka.distance(&kb);
        if dist == 0.0 || !segment_in_set(&sampler, ka, &kb) {
            continue;
        }
        let hb = gradient::hessian_matrix_at(sys, &kb, &evb)?;
        let diff = (&hb.h - &hessians[a].h).norm();
        lipschitz.push(diff / (constants.m * dist));
    }

    // Reference gain for the rank-deficient bound: the best gain seen.
    let kref = gains
        .iter()
        .min_by(|a, b| a.1.cost.total_cmp(&b.1.cost))
        .map(|(k, _)| k.clone())
        .unwrap_or_else(|| k0.clone());
    let mut rankdef = Vec::new();
    let mut full_upper = Vec::new();
    let mut full_lower = Vec::new();
    let full_rank_ref = if c_is_square_full_rank(sys) {
        let opt = lyapunov::dare_state_feedback(sys)?;
        let cinv = sys
            .c()
            .clone()
            .try_inverse()
            .ok_or(SofError::Singular { context: "C inverse" })?;
        Some(Gain::new(opt.gain * cinv)?)
    } else {
        None
    };
    for (k, ev) in &gains {
        let rep = dominance_report(sys, k, &kref)?;
        let lhs = ev.cost - rep.j_ref;
        rankdef.push(ratio_or_zero(lhs, rep.gap_upper_rankdef));
        if let Some(kstar) = &full_rank_ref {
            let rep = dominance_report(sys, k, kstar)?;
            let gap = rep.j_of_k - rep.js_star.unwrap_or(0.0);
            full_upper.push(ratio_or_zero(gap, rep.gap_upper_fullrank.unwrap_or(0.0)));
            // lower bound: lower <= gap, expressed as lower / gap <= 1
            full_lower.push(ratio_or_zero(rep.gap_lower_fullrank.unwrap_or(0.0), gap));
        }
    }

    let mut certificates = vec![
        Certificate::from_ratios("trace_bound_P", &trace_p),
        Certificate::from_ratios("trace_bound_Sigma", &trace_s),
        Certificate::from_ratios("psi_bound", &psi),
        Certificate::from_ratios("smoothness_L", &smooth),
        Certificate::from_ratios("hessian_lipschitz_M", &lipschitz),
        Certificate::from_ratios("dominance_rank_deficient", &rankdef),
    ];
    if full_rank_ref.is_some() {
        certificates.push(Certificate::from_ratios("dominance_upper_full_rank", &full_upper));
        certificates.push(Certificate::from_ratios("dominance_lower_full_rank", &full_lower));
    }
    Ok(CertificateSuite {
        constants,
        certificates,
    })
}

/// `num / den` with rounding-level numerators mapped to zero.
fn ratio_or_zero(num: f64, den: f64) -> f64 {
    if num <= 1e-12 * den.abs().max(1e-300) || num <= 0.0 {
        0.0
    } else if den <= 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}
