//! Trajectory simulation and the zeroth-order estimators of the model-free
//! vanilla and natural policy gradient.
//!
//! Randomness is counter based: trajectory `i` of the estimate taken at
//! iteration `j` reads ChaCha8 stream `j` of the run seed at word offset
//! `i << 32`, so results do not depend on how rollouts are scheduled.

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SofError};
use crate::gradient;
use crate::linalg::{self, Mat};
use crate::lyapunov;
use crate::model::{self, Gain, LtiSystem};
use crate::optimize::{IterRecord, Method, ModelFreeStats, RunLog, Termination};

/// Largest tolerated fraction of divergent perturbed rollouts.
pub const MAX_DIVERGENT_FRACTION: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZerothOrderConfig {
    /// `z`
    pub num_trajectories: usize,
    /// `l`
    pub rollout_length: usize,
    /// `r`
    pub perturbation_radius: f64,
    /// `eta`
    pub step_size: f64,
    pub seed: u64,
}

impl ZerothOrderConfig {
    /// `z = 2^14`, `l = 100`, `r = 1e-3`, `eta = 0.2`.
    pub fn reference(seed: u64) -> Self {
        Self {
            num_trajectories: 1 << 14,
            rollout_length: 100,
            perturbation_radius: 1e-3,
            step_size: 0.2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_trajectories == 0 || self.rollout_length == 0 {
            return Err(SofError::InvalidArgument(
                "num_trajectories and rollout_length must be positive".into(),
            ));
        }
        for (name, v) in [
            ("perturbation_radius", self.perturbation_radius),
            ("step_size", self.step_size),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SofError::InvalidArgument(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// A simulated trajectory of `length` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub outputs: Vec<DVector<f64>>,
    pub costs: Vec<f64>,
    pub x0: DVector<f64>,
}

/// `x_{t+1} = A x_t + B u_t`, `y_t = C x_t`, `u_t = -K y_t`, with stage
/// cost `c_t = x_t^T Q x_t + u_t^T R u_t`.
pub fn simulate(sys: &LtiSystem, k: &Gain, x0: &DVector<f64>, length: usize) -> Result<Rollout> {
    check_x0(sys, x0)?;
    let acl = model::closed_loop(sys, k)?;
    let mut x = x0.clone();
    let mut outputs = Vec::with_capacity(length);
    let mut costs = Vec::with_capacity(length);
    for t in 0..length {
        let y = sys.c() * &x;
        let u = -(k.matrix() * &y);
        let c = x.dot(&(sys.q() * &x)) + u.dot(&(sys.r() * &u));
        if !c.is_finite() || y.iter().any(|v| !v.is_finite()) {
            return Err(SofError::DivergentRollout {
                last_finite: t.checked_sub(1),
            });
        }
        outputs.push(y);
        costs.push(c);
        x = &acl * x;
    }
    Ok(Rollout {
        outputs,
        costs,
        x0: x0.clone(),
    })
}

fn check_x0(sys: &LtiSystem, x0: &DVector<f64>) -> Result<()> {
    if x0.len() != sys.n() {
        return Err(SofError::Dimension {
            field: "x0",
            expected_rows: sys.n(),
            expected_cols: 1,
            rows: x0.len(),
            cols: 1,
        });
    }
    Ok(())
}

/// Zero-mean Gaussian draw with covariance `X0`, via its Cholesky factor.
pub fn sample_initial_state<R: Rng + ?Sized>(x0_cov: &Mat, rng: &mut R) -> Result<DVector<f64>> {
    let chol = x0_cov
        .clone()
        .cholesky()
        .ok_or(SofError::NotPositiveDefinite { name: "X0" })?;
    Ok(sample_with_factor(chol.l_dirty(), rng))
}

fn sample_with_factor<R: Rng + ?Sized>(lower: &Mat, rng: &mut R) -> DVector<f64> {
    let n = lower.nrows();
    let xi = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    lower.lower_triangle() * xi
}

/// Uniform draw from the unit Frobenius sphere in `R^{m x d}`.
pub fn sample_unit_sphere<R: Rng + ?Sized>(m: usize, d: usize, rng: &mut R) -> Mat {
    loop {
        let u = Mat::from_fn(m, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = u.norm();
        if norm > 0.0 {
            return u / norm;
        }
    }
}

/// Per-trajectory generator for estimate `iteration`, trajectory `index`.
pub fn trajectory_rng(seed: u64, iteration: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    rng.set_word_pos((index as u128) << 32);
    rng
}

/// Summed cost and, optionally, summed output outer products of a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutSummary {
    pub cost: f64,
    pub output_correlation: Option<Mat>,
}

/// Black-box access to the plant: only rollouts and initial-state draws.
pub trait Simulator: Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn sample_initial_state(&self, rng: &mut ChaCha8Rng) -> DVector<f64>;
    /// `DivergentRollout` if the trajectory overflows.
    fn rollout(
        &self,
        k: &Gain,
        x0: &DVector<f64>,
        length: usize,
        collect_outputs: bool,
    ) -> Result<RolloutSummary>;
}

/// Simulator backed by a known model.
#[derive(Debug, Clone)]
pub struct ModelSimulator {
    sys: LtiSystem,
    x0_factor: Mat,
}

impl ModelSimulator {
    pub fn new(sys: &LtiSystem) -> Result<Self> {
        let chol = sys
            .x0()
            .clone()
            .cholesky()
            .ok_or(SofError::NotPositiveDefinite { name: "X0" })?;
        Ok(Self {
            sys: sys.clone(),
            x0_factor: chol.l(),
        })
    }

    pub fn system(&self) -> &LtiSystem {
        &self.sys
    }
}

impl Simulator for ModelSimulator {
    fn state_dim(&self) -> usize {
        self.sys.n()
    }
    fn input_dim(&self) -> usize {
        self.sys.m()
    }
    fn output_dim(&self) -> usize {
        self.sys.d()
    }

    fn sample_initial_state(&self, rng: &mut ChaCha8Rng) -> DVector<f64> {
        sample_with_factor(&self.x0_factor, rng)
    }

    fn rollout(
        &self,
        k: &Gain,
        x0: &DVector<f64>,
        length: usize,
        collect_outputs: bool,
    ) -> Result<RolloutSummary> {
        let sys = &self.sys;
        let (n, d) = (sys.n(), sys.d());
        // Flat row-major copies keep the inner loop allocation free.
        let acl = linalg::flatten_row_major(&model::closed_loop(sys, k)?);
        let w = linalg::flatten_row_major(&lyapunov::stage_weight(sys, k));
        let c = linalg::flatten_row_major(sys.c());
        let mut x: Vec<f64> = x0.iter().copied().collect();
        let mut next = vec![0.0; n];
        let mut y = vec![0.0; d];
        let mut corr = vec![0.0; if collect_outputs { d * d } else { 0 }];
        let mut total = 0.0;
        for t in 0..length {
            let mut stage = 0.0;
            for i in 0..n {
                let row = &w[i * n..(i + 1) * n];
                stage += x[i] * row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
            }
            if !stage.is_finite() {
                return Err(SofError::DivergentRollout {
                    last_finite: t.checked_sub(1),
                });
            }
            total += stage;
            if collect_outputs {
                for (i, yi) in y.iter_mut().enumerate() {
                    *yi = c[i * n..(i + 1) * n].iter().zip(&x).map(|(a, b)| a * b).sum();
                }
                for i in 0..d {
                    for j in 0..d {
                        corr[i * d + j] += y[i] * y[j];
                    }
                }
            }
            for (i, v) in next.iter_mut().enumerate() {
                *v = acl[i * n..(i + 1) * n].iter().zip(&x).map(|(a, b)| a * b).sum();
            }
            std::mem::swap(&mut x, &mut next);
        }
        if !total.is_finite() {
            return Err(SofError::DivergentRollout {
                last_finite: length.checked_sub(1),
            });
        }
        Ok(RolloutSummary {
            cost: total,
            output_correlation: collect_outputs.then(|| Mat::from_row_slice(d, d, &corr)),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub grad: Mat,
    /// Output correlation estimate (`L_K`).
    pub output_correlation: Mat,
    /// Mean nominal rollout cost.
    pub cost: f64,
    pub used: usize,
    pub divergent: usize,
}

pub trait GradientOracle: Sync {
    fn estimate(&self, k: &Gain, iteration: u64) -> Result<GradientEstimate>;
}

/// One-point perturbed-minus-nominal estimator over `z` shared-`x0` pairs.
pub struct ZerothOrderEstimator<'a, S: Simulator> {
    pub sim: &'a S,
    pub cfg: ZerothOrderConfig,
}

struct Sample {
    nominal: f64,
    corr: Mat,
    /// `(J_perturbed - J_nominal) / r * U`, or `None` if the perturbed
    /// rollout diverged.
    term: Option<Mat>,
}

impl<S: Simulator> ZerothOrderEstimator<'_, S> {
    fn sample(&self, k: &Gain, iteration: u64, index: u64) -> Result<Sample> {
        let mut rng = trajectory_rng(self.cfg.seed, iteration, index);
        let x0 = self.sim.sample_initial_state(&mut rng);
        let len = self.cfg.rollout_length;
        let nominal = self.sim.rollout(k, &x0, len, true)?;
        let u = sample_unit_sphere(self.sim.input_dim(), self.sim.output_dim(), &mut rng);
        let r = self.cfg.perturbation_radius;
        let kp = k.step(&u, -r)?;
        let term = match self.sim.rollout(&kp, &x0, len, false) {
            Ok(p) => Some(u * ((p.cost - nominal.cost) / r)),
            Err(SofError::DivergentRollout { .. }) => None,
            Err(e) => return Err(e),
        };
        Ok(Sample {
            nominal: nominal.cost,
            corr: nominal.output_correlation.expect("requested outputs"),
            term,
        })
    }
}

impl<S: Simulator> GradientOracle for ZerothOrderEstimator<'_, S> {
    fn estimate(&self, k: &Gain, iteration: u64) -> Result<GradientEstimate> {
        self.cfg.validate()?;
        let z = self.cfg.num_trajectories;
        let samples: Vec<Sample> = (0..z as u64)
            .into_par_iter()
            .map(|i| self.sample(k, iteration, i))
            .collect::<Result<_>>()?;

        // fixed-order reduction
        let (m, d) = (self.sim.input_dim(), self.sim.output_dim());
        let mut grad = Mat::zeros(m, d);
        let mut corr = Mat::zeros(d, d);
        let mut cost = 0.0;
        let mut used = 0usize;
        for s in &samples {
            cost += s.nominal;
            corr += &s.corr;
            if let Some(t) = &s.term {
                grad += t;
                used += 1;
            }
        }
        let divergent = z - used;
        if divergent as f64 > MAX_DIVERGENT_FRACTION * z as f64 {
            return Err(SofError::EstimationUnreliable {
                divergent,
                total: z,
            });
        }
        Ok(GradientEstimate {
            grad: grad / used as f64,
            output_correlation: corr / z as f64,
            cost: cost / z as f64,
            used,
            divergent,
        })
    }
}

/// Noise-free oracle returning the exact gradient and `L_K`.
pub struct ExactGradient<'a> {
    pub sys: &'a LtiSystem,
}

impl GradientOracle for ExactGradient<'_> {
    fn estimate(&self, k: &Gain, _iteration: u64) -> Result<GradientEstimate> {
        let (ev, g) = gradient::evaluate_with_gradient(self.sys, k)?;
        Ok(GradientEstimate {
            grad: g.grad,
            output_correlation: ev.lout,
            cost: ev.cost,
            used: 1,
            divergent: 0,
        })
    }
}

/// `grad_hat` and `L_hat` at `k` with the zeroth-order estimator on a
/// model-backed simulator.
pub fn estimate(sys: &LtiSystem, k: &Gain, cfg: &ZerothOrderConfig) -> Result<GradientEstimate> {
    lyapunov::evaluate(sys, k)?;
    let sim = ModelSimulator::new(sys)?;
    ZerothOrderEstimator { sim: &sim, cfg: *cfg }.estimate(k, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelFreeSettings {
    pub method: Method,
    pub step_size: f64,
    pub epsilon: f64,
    pub max_iters: usize,
    pub seed: u64,
}

/// Model-free vanilla or natural policy gradient driven by `oracle`.
///
/// When `model` is given, each record also carries the exact `J`,
/// `||grad J||` and spectral radius, and an iterate that leaves the
/// stabilizing set is reported as `UnstableIterate`. Without a model those
/// columns are NaN.
pub fn run_modelfree(
    oracle: &dyn GradientOracle,
    model: Option<&LtiSystem>,
    k0: &Gain,
    settings: ModelFreeSettings,
) -> Result<RunLog> {
    if settings.method == Method::GaussNewton {
        return Err(SofError::InvalidArgument(
            "the Gauss-Newton direction needs B and P_K and has no model-free form".into(),
        ));
    }
    if !(settings.step_size > 0.0 && settings.epsilon > 0.0) {
        return Err(SofError::InvalidArgument(
            "step size and epsilon must be positive".into(),
        ));
    }
    let start = std::time::Instant::now();
    let exact = |k: &Gain| -> Result<(f64, f64, f64)> {
        match model {
            Some(sys) => {
                let (ev, g) = gradient::evaluate_with_gradient(sys, k)?;
                Ok((ev.cost, g.grad_norm, ev.stability.spectral_radius))
            }
            None => Ok((f64::NAN, f64::NAN, f64::NAN)),
        }
    };

    let mut k = k0.clone();
    let mut truth = exact(&k)?;
    let mut records = Vec::new();
    let mut eta_used = 0.0;
    let terminated_by = loop {
        let iter = records.len();
        let est = oracle.estimate(&k, iter as u64)?;
        let dir = match settings.method {
            Method::Natural => linalg::solve_right_spd(&est.grad, &est.output_correlation, "L_hat")?,
            _ => est.grad.clone(),
        };
        let grad_hat_norm = est.grad.norm();
        records.push(IterRecord {
            iter,
            k: linalg::flatten_row_major(k.matrix()),
            j: truth.0,
            grad_norm: truth.1,
            method_grad_norm: dir.norm(),
            rho: truth.2,
            eta_used,
            halvings: 0,
            elapsed: start.elapsed().as_secs_f64(),
            model_free: Some(ModelFreeStats {
                grad_hat_norm,
                divergent_count: est.divergent,
            }),
        });
        if grad_hat_norm <= settings.epsilon {
            break Termination::Stationary;
        }
        if iter >= settings.max_iters {
            break Termination::MaxIters;
        }
        let next = k.step(&dir, settings.step_size)?;
        truth = match exact(&next) {
            Ok(t) => t,
            Err(SofError::UnstableClosedLoop { spectral_radius }) => {
                return Err(SofError::UnstableIterate {
                    iteration: iter + 1,
                    spectral_radius,
                    gain: linalg::flatten_row_major(next.matrix()),
                })
            }
            Err(e) => return Err(e),
        };
        k = next;
        eta_used = settings.step_size;
    };

    Ok(RunLog {
        method: settings.method,
        eta: settings.step_size,
        epsilon: settings.epsilon,
        gain_shape: (k0.rows(), k0.cols()),
        records,
        terminated_by,
        theoretical_budget: None,
        seed: Some(settings.seed),
    })
}

/// Cosine of the angle between two equally shaped matrices.
pub fn cosine_similarity(a: &Mat, b: &Mat) -> f64 {
    a.dot(b) / (a.norm() * b.norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimize::{self, OptimizerConfig, StepSize};
    use crate::systems;

    #[test]
    fn zero_state_gives_zero_rollout() {
        let sys = systems::example_one();
        let r = simulate(&sys, &systems::example_one_k0(), &DVector::zeros(2), 10).unwrap();
        assert_eq!(r.outputs.len(), 10);
        assert!(r.costs.iter().all(|c| *c == 0.0));
        assert!(r.outputs.iter().all(|y| y.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn rollout_cost_matches_truncated_value() {
        let sys = systems::example_one();
        let k = systems::example_one_k0();
        let x0 = DVector::from_vec(vec![1.0, 1.0]);
        let len = 100;
        let r = simulate(&sys, &k, &x0, len).unwrap();
        let ev = lyapunov::evaluate(&sys, &k).unwrap();
        // sum_{t<l} c_t = x0^T (P - (A^l)^T P A^l) x0 exactly
        let al = ev.acl.pow(len as u32);
        let expected = x0.dot(&((&ev.p - al.transpose() * &ev.p * &al) * &x0));
        let got: f64 = r.costs.iter().sum();
        assert!((got - expected).abs() <= 1e-10 * expected);

        let sim = ModelSimulator::new(&sys).unwrap();
        let fast = sim.rollout(&k, &x0, len, true).unwrap();
        assert!((fast.cost - got).abs() <= 1e-12 * got);
        let corr: Mat = r.outputs.iter().map(|y| y * y.transpose()).sum();
        assert!((fast.output_correlation.unwrap() - corr).norm() <= 1e-12 * got);
    }

    #[test]
    fn unstable_gain_grows() {
        let sys = systems::example_one();
        let x0 = DVector::from_vec(vec![1.0, 0.5]);
        // complex pair of modulus ~1.005 rotating ~0.1 rad per step: the
        // envelope grows, measured as maxima over one rotation period
        let r = simulate(&sys, &Gain::scalar(2.0).unwrap(), &x0, 400).unwrap();
        let maxima: Vec<f64> = r
            .costs
            .chunks(63)
            .map(|c| c.iter().copied().fold(0.0, f64::max))
            .collect();
        assert!(maxima[1..].windows(2).all(|w| w[1] > w[0]), "{maxima:?}");
        // real dominant eigenvalue -1.095: every step grows eventually
        let r = simulate(&sys, &Gain::scalar(23.0).unwrap(), &x0, 200).unwrap();
        assert!(r.costs[100..].windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn overflow_is_reported() {
        let sys = systems::example_one();
        let err = simulate(&sys, &Gain::scalar(1e6).unwrap(), &DVector::from_vec(vec![1.0, 1.0]), 400);
        assert!(matches!(err, Err(SofError::DivergentRollout { .. })));
    }

    #[test]
    fn unit_sphere_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let u = sample_unit_sphere(2, 3, &mut rng);
            assert!((u.norm() - 1.0).abs() <= 1e-15);
            let s = sample_unit_sphere(1, 1, &mut rng)[(0, 0)];
            assert!(s == 1.0 || s == -1.0);
        }
    }

    #[test]
    fn counter_rng_is_position_addressed() {
        let a: f64 = trajectory_rng(7, 3, 5).random();
        let b: f64 = trajectory_rng(7, 3, 5).random();
        let c: f64 = trajectory_rng(7, 3, 6).random();
        let d: f64 = trajectory_rng(7, 4, 5).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    /// Stub whose rollout cost is `sum(K)`; the estimator must return
    /// `((J(K + rU) - J(K)) / r) U` exactly for `z = 1`.
    struct LinearStub;
    impl Simulator for LinearStub {
        fn state_dim(&self) -> usize {
            1
        }
        fn input_dim(&self) -> usize {
            1
        }
        fn output_dim(&self) -> usize {
            2
        }
        fn sample_initial_state(&self, _rng: &mut ChaCha8Rng) -> DVector<f64> {
            DVector::from_element(1, 1.0)
        }
        fn rollout(&self, k: &Gain, _x0: &DVector<f64>, _l: usize, outputs: bool) -> Result<RolloutSummary> {
            Ok(RolloutSummary {
                cost: k.matrix().sum(),
                output_correlation: outputs.then(|| Mat::identity(2, 2)),
            })
        }
    }

    #[test]
    fn single_sample_estimate_is_the_scaled_difference() {
        let cfg = ZerothOrderConfig {
            num_trajectories: 1,
            rollout_length: 1,
            perturbation_radius: 0.25,
            step_size: 0.1,
            seed: 9,
        };
        let k = Gain::from_row_slice(1, 2, &[1.0, 2.0]).unwrap();
        let est = ZerothOrderEstimator { sim: &LinearStub, cfg }.estimate(&k, 0).unwrap();
        let mut rng = trajectory_rng(9, 0, 0);
        let _ = LinearStub.sample_initial_state(&mut rng);
        let u = sample_unit_sphere(1, 2, &mut rng);
        let jp = (k.matrix() + &u * 0.25).sum();
        let expected = &u * ((jp - k.matrix().sum()) / 0.25);
        assert_eq!(est.grad, expected);
        assert_eq!(est.output_correlation, Mat::identity(2, 2));
    }

    #[test]
    fn exact_oracle_reproduces_model_based_vanilla() {
        let sys = systems::example_one();
        let k0 = systems::example_one_k0();
        let settings = ModelFreeSettings {
            method: Method::Vanilla,
            step_size: 0.2,
            epsilon: 1e-8,
            max_iters: 60,
            seed: 0,
        };
        let mf = run_modelfree(&ExactGradient { sys: &sys }, Some(&sys), &k0, settings).unwrap();
        let cfg = OptimizerConfig::new(Method::Vanilla, StepSize::Fixed(0.2)).with_max_iters(60);
        let mb = optimize::run(&sys, &k0, cfg).unwrap();
        assert_eq!(mf.records.len(), mb.records.len());
        for (a, b) in mf.records.iter().zip(&mb.records) {
            assert_eq!(a.k, b.k);
            assert_eq!(a.j, b.j);
        }
    }

    #[test]
    fn gauss_newton_is_rejected_model_free() {
        let sys = systems::example_one();
        let settings = ModelFreeSettings {
            method: Method::GaussNewton,
            step_size: 0.2,
            epsilon: 1e-8,
            max_iters: 1,
            seed: 0,
        };
        assert!(run_modelfree(&ExactGradient { sys: &sys }, None, &systems::example_one_k0(), settings).is_err());
    }

    #[test]
    fn small_estimate_is_deterministic_and_roughly_aligned() {
        let sys = systems::example_two();
        let k = systems::example_two_k0();
        let cfg = ZerothOrderConfig {
            num_trajectories: 512,
            ..ZerothOrderConfig::reference(4)
        };
        let a = estimate(&sys, &k, &cfg).unwrap();
        let b = estimate(&sys, &k, &cfg).unwrap();
        assert_eq!(a, b);
        let (ev, g) = gradient::evaluate_with_gradient(&sys, &k).unwrap();
        assert!(cosine_similarity(&a.grad, &g.grad) > 0.5);
        let rel = (&a.output_correlation - &ev.lout).norm() / ev.lout.norm();
        assert!(rel < 0.25, "L_hat relative error {rel}");
    }
}
