//! Acceptance suite: runs the twelve acceptance criteria at their stated
//! tolerances, prints one PASS/FAIL line per criterion, and exits non-zero
//! if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sof_core::gradient;
use sof_core::landscape::{self, GammaSource, LandscapeConstants, SublevelSampler};
use sof_core::linalg::{self, Mat};
use sof_core::lyapunov;
use sof_core::modelfree::{
    self, ModelFreeSettings, ModelSimulator, ZerothOrderConfig, ZerothOrderEstimator,
};
use sof_core::optimize::{self, Method, Optimizer, OptimizerConfig, StepSize};
use sof_core::systems;
use sof_core::{Gain, LtiSystem, SofError};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

/// Stabilizing gains drawn from the sublevel set at twice the cost of `center`.
fn random_gains(sys: &LtiSystem, center: &Gain, count: usize, seed: u64) -> Vec<Gain> {
    let alpha = 2.0 * lyapunov::cost(sys, center).unwrap();
    SublevelSampler::new(sys, alpha, center, seed)
        .draw_many(count)
        .unwrap()
        .into_iter()
        .map(|(k, _)| k)
        .collect()
}

fn random_unit(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    let z = Mat::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
    let n = z.norm();
    z / n
}

fn example_systems() -> Vec<(&'static str, LtiSystem, Gain)> {
    vec![
        ("example I", systems::example_one(), systems::example_one_k0()),
        ("example II", systems::example_two(), systems::example_two_k0()),
    ]
}

fn criterion_1() -> Outcome {
    let sys = systems::example_one();
    let mut ok = true;
    let mut parts = Vec::new();
    for method in Method::ALL {
        let cfg = OptimizerConfig::new(method, StepSize::Fixed(0.2)).with_max_iters(1000);
        let t = Instant::now();
        let log = optimize::run(&sys, &systems::example_one_k0(), cfg).unwrap();
        let secs = t.elapsed().as_secs_f64();
        let err = (log.final_gain().matrix()[(0, 0)] - 4.0637).abs();
        let pass = err <= 5e-3 && secs < 1.0;
        ok &= pass;
        parts.push(format!(
            "{method}: |K-4.0637|={err:.2e} in {} iters, {secs:.3}s",
            log.iterations()
        ));
    }
    outcome(ok, parts.join("; "))
}

fn criterion_2() -> Outcome {
    let sys = systems::example_two();
    let kstar = systems::example_two_kstar();
    let t = Instant::now();
    let mut ok = true;
    let mut parts = Vec::new();
    for method in Method::ALL {
        let cfg = OptimizerConfig::new(method, StepSize::Fixed(0.2)).with_max_iters(1000);
        let log = optimize::run(&sys, &systems::example_two_k0(), cfg).unwrap();
        let rel = log.final_gain().distance(&kstar) / kstar.matrix().norm();
        ok &= rel <= 1e-2;
        parts.push(format!(
            "{method}: rel err {rel:.3e} after {} iters (J={:.6})",
            log.iterations(),
            log.last().j
        ));
    }
    let secs = t.elapsed().as_secs_f64();
    ok &= secs < 5.0;
    parts.push(format!("{secs:.2}s"));
    outcome(ok, parts.join("; "))
}

fn criterion_3() -> Outcome {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, (_, sys, k0)) in example_systems().into_iter().enumerate() {
        for k in random_gains(&sys, &k0, 50, 300 + i as u64) {
            let (_, g) = gradient::evaluate_with_gradient(&sys, &k).unwrap();
            let fd = Mat::from_fn(k.rows(), k.cols(), |r, c| {
                let mut e = Mat::zeros(k.rows(), k.cols());
                e[(r, c)] = 1.0;
                let jp = lyapunov::cost(&sys, &k.step(&e, -h).unwrap()).unwrap();
                let jm = lyapunov::cost(&sys, &k.step(&e, h).unwrap()).unwrap();
                (jp - jm) / (2.0 * h)
            });
            worst = worst.max((&fd - &g.grad).norm() / g.grad.norm());
        }
    }
    outcome(worst <= 1e-6, format!("worst relative error {worst:.3e} over 100 gains"))
}

fn criterion_4() -> Outcome {
    let h = 1e-4;
    let mut worst_fd: f64 = 0.0;
    let mut worst_mat: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    for (i, (_, sys, k0)) in example_systems().into_iter().enumerate() {
        let gains = random_gains(&sys, &k0, 20, 410 + i as u64);
        for k in &gains {
            let z = random_unit(k.rows(), k.cols(), &mut rng);
            let q = gradient::hessian_quadratic(&sys, k, &z).unwrap();
            let j0 = lyapunov::cost(&sys, k).unwrap();
            let jp = lyapunov::cost(&sys, &k.step(&z, -h).unwrap()).unwrap();
            let jm = lyapunov::cost(&sys, &k.step(&z, h).unwrap()).unwrap();
            let fd = (jp - 2.0 * j0 + jm) / (h * h);
            worst_fd = worst_fd.max((fd - q).abs() / q.abs());
        }
        for k in &gains {
            let hm = gradient::hessian_matrix(&sys, k).unwrap();
            let z = random_unit(k.rows(), k.cols(), &mut rng);
            let v = linalg::vec_col(&z);
            let assembled = (v.transpose() * &hm.h * &v)[(0, 0)];
            let q = gradient::hessian_quadratic(&sys, k, &z).unwrap();
            worst_mat = worst_mat.max((assembled - q).abs() / q.abs());
        }
    }
    outcome(
        worst_fd <= 1e-4 && worst_mat <= 1e-9,
        format!(
            "second-difference worst rel {worst_fd:.3e} (40 pairs); assembled vs quadratic form worst rel {worst_mat:.3e} (40 directions)"
        ),
    )
}

fn criterion_5() -> Outcome {
    let mut worst: f64 = 0.0;
    for (i, (_, sys, k0)) in example_systems().into_iter().enumerate() {
        let a = random_gains(&sys, &k0, 50, 500 + i as u64);
        let b = random_gains(&sys, &k0, 50, 550 + i as u64);
        for (k, kp) in a.iter().zip(&b) {
            let pd = landscape::performance_difference(&sys, k, kp).unwrap();
            let diff = lyapunov::cost(&sys, kp).unwrap() - lyapunov::cost(&sys, k).unwrap();
            worst = worst.max((pd - diff).abs() / diff.abs());
        }
    }
    outcome(worst <= 1e-8, format!("worst relative error {worst:.3e} over 100 pairs"))
}

fn criterion_6() -> Outcome {
    let sys = systems::example_one();
    let k0 = systems::example_one_k0();
    let alpha = lyapunov::cost(&sys, &k0).unwrap();
    let suite = landscape::certify(&sys, &k0, alpha, 100, 10_000, 600).unwrap();
    let required = [
        "trace_bound_P",
        "trace_bound_Sigma",
        "psi_bound",
        "smoothness_L",
        "hessian_lipschitz_M",
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for cert in &suite.certificates {
        if required.contains(&cert.name.as_str()) {
            ok &= cert.passed && cert.samples == 100;
        }
        parts.push(format!(
            "{} worst ratio {:.3e} (n={})",
            cert.name, cert.worst_ratio, cert.samples
        ));
    }
    parts.push(format!(
        "alpha={:.6} L={:.4e} psi={:.4e} gamma={:.4} M={:.4e}",
        suite.constants.alpha, suite.constants.l, suite.constants.psi, suite.constants.gamma, suite.constants.m
    ));
    outcome(ok, parts.join("; "))
}

fn criterion_7() -> Outcome {
    let sys = systems::example_one();
    let cfg = OptimizerConfig::new(Method::Vanilla, StepSize::Auto)
        .with_epsilon(1e-300)
        .with_max_iters(500);
    let log = optimize::run(&sys, &systems::example_one_k0(), cfg).unwrap();
    let eta = log.eta;
    let alpha = log.records[0].j;
    let mut descent_violations = 0;
    for w in log.records.windows(2) {
        if w[1].j > w[0].j - eta / 2.0 * w[0].grad_norm.powi(2) {
            descent_violations += 1;
        }
    }
    let mut prefix_violations = 0;
    let mut min_sq = f64::INFINITY;
    for (n, rec) in log.records.iter().enumerate() {
        min_sq = min_sq.min(rec.grad_norm.powi(2));
        if n >= 1 && min_sq > 2.0 * alpha / (eta * n as f64) {
            prefix_violations += 1;
        }
    }
    let ok = log.iterations() == 500 && descent_violations == 0 && prefix_violations == 0;
    outcome(
        ok,
        format!(
            "eta=1/L={eta:.4e}, {} iters, descent violations {descent_violations}, prefix violations {prefix_violations}, J {:.6} -> {:.6}",
            log.iterations(),
            alpha,
            log.last().j
        ),
    )
}

/// Fraction of the initial method-gradient norm used as the stationarity
/// target, and of the initial optimality gap used as `epsilon_J`.
const BUDGET_EPS_FRACTION: f64 = 0.5;
const BUDGET_GAP_FRACTION: f64 = 0.5;

fn criterion_8() -> Outcome {
    let sys = systems::example_one_full_state();
    let k0 = Gain::from_row_slice(1, 2, &[9.0, 9.0]).unwrap();
    let alpha = lyapunov::cost(&sys, &k0).unwrap();
    let opt = lyapunov::dare_state_feedback(&sys).unwrap();
    let kstar = Gain::new(opt.gain.clone()).unwrap();
    let sigma_kstar = linalg::spectral_norm(&lyapunov::evaluate(&sys, &kstar).unwrap().sigma);
    let gap0 = alpha - opt.cost;
    let eps_j = BUDGET_GAP_FRACTION * gap0;
    let mut ok = true;
    let mut parts = Vec::new();
    for method in Method::ALL {
        let cfg = OptimizerConfig::new(method, StepSize::Auto)
            .with_epsilon(1e-300)
            .with_max_iters(usize::MAX);
        let mut run = Optimizer::new(&sys, &k0, cfg).unwrap();
        let eta = run.eta();
        let epsilon = BUDGET_EPS_FRACTION * run.method_grad_norm();
        let budget = optimize::iteration_budget(
            method,
            eta,
            alpha,
            epsilon,
            sys.mu(),
            linalg::sigma_min(sys.c()),
            linalg::sigma_min(sys.r()),
        );
        let linear =
            optimize::linear_rate_budget(&sys, method, eta, sigma_kstar, gap0, eps_j).unwrap();
        let limit = budget.max(linear.iterations);
        let mut hit_eps = None;
        let mut hit_gap = None;
        while run.iteration() as u64 <= limit {
            let i = run.iteration() as u64;
            if hit_eps.is_none() && run.method_grad_norm() <= epsilon {
                hit_eps = Some(i);
            }
            if hit_gap.is_none() && run.eval().cost - opt.cost <= eps_j {
                hit_gap = Some(i);
            }
            if hit_eps.is_some() && hit_gap.is_some() {
                break;
            }
            if run.step().unwrap().is_none() {
                break;
            }
        }
        let eps_ok = hit_eps.is_some_and(|n| n <= budget);
        let gap_ok = hit_gap.is_some_and(|n| n <= linear.iterations);
        ok &= eps_ok && gap_ok;
        parts.push(format!(
            "{method}: eta={eta:.3e}, eps-stationary at {hit_eps:?} <= {budget}, eps_J-optimal at {hit_gap:?} <= {}",
            linear.iterations
        ));
    }
    outcome(ok, parts.join("; "))
}

fn criterion_9() -> Outcome {
    let sys = systems::example_one();
    let converged = optimize::run(
        &sys,
        &systems::example_one_k0(),
        OptimizerConfig::new(Method::Vanilla, StepSize::Fixed(0.2)).with_epsilon(1e-12),
    )
    .unwrap();
    let k_hash = converged.final_gain();
    let k0 = Gain::scalar(k_hash.matrix()[(0, 0)] + 0.01).unwrap();
    let alpha = lyapunov::cost(&sys, &k0).unwrap();
    let constants =
        LandscapeConstants::compute(&sys, alpha, &k0, GammaSource::Sampled {
            seed_gain_cost: alpha,
            samples: 10_000,
            seed: 900,
        })
        .unwrap();
    let cfg = OptimizerConfig::new(Method::Vanilla, StepSize::Auto)
        .with_epsilon(1e-300)
        .with_max_iters(500);
    let log = optimize::run(&sys, &k0, cfg).unwrap();
    match optimize::local_convergence_monitor(&sys, &k_hash, &log, constants.m) {
        Ok(rep) => {
            let violations = rep.points.iter().filter(|p| !p.holds).count();
            outcome(
                rep.passed,
                format!(
                    "l={:.4e} M={:.4e} r_bar={:.4e} r0={:.4e}, {violations} violations over {} iterates",
                    rep.l,
                    constants.m,
                    rep.r_bar,
                    rep.r0,
                    rep.points.len()
                ),
            )
        }
        Err(SofError::OutsideBasin { r0, r_bar }) => {
            let l = gradient::hessian_matrix(&sys, &k_hash).unwrap().min_eig;
            // Empirical contraction, for the record: the worst per-step ratio
            // of successive errors against the predicted factor.
            let errs: Vec<f64> = (0..log.records.len())
                .map(|i| log.gain_at(i).distance(&k_hash))
                .collect();
            let worst_ratio = errs
                .windows(2)
                .filter(|w| w[0] > 1e-12)
                .map(|w| w[1] / w[0])
                .fold(0.0, f64::max);
            outcome(
                false,
                format!(
                    "precondition r0 < r_bar fails: r0={r0:.4e}, r_bar=2l/M={r_bar:.4e} (l={l:.4e}, M={:.4e} at alpha={alpha:.6}); observed worst error ratio {worst_ratio:.8} vs 1/(1+eta l)={:.8}",
                    constants.m,
                    1.0 / (1.0 + log.eta * l)
                ),
            )
        }
        Err(e) => outcome(false, format!("monitor error: {e}")),
    }
}

fn criterion_10() -> Outcome {
    let sys = systems::example_one();
    let k0 = systems::example_one_k0();
    let x0_a = DMatrix::from_diagonal_element(2, 2, 0.1);
    let x0_b = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.01]);
    let cfg = OptimizerConfig::new(Method::Vanilla, StepSize::Fixed(0.2)).with_epsilon(1e-8);
    let rank_def = optimize::stationarity_sensitivity(&sys, &k0, &x0_a, &x0_b, cfg).unwrap();
    let exempt = rank_def.e_norm_a <= 1e-6 && rank_def.e_norm_b <= 1e-6;
    let full = systems::example_one_full_state();
    let k0_full = Gain::from_row_slice(1, 2, &[9.0, 9.0]).unwrap();
    let full_rep = optimize::stationarity_sensitivity(&full, &k0_full, &x0_a, &x0_b, cfg).unwrap();
    let ok = (rank_def.differ || exempt) && !full_rep.differ;
    outcome(
        ok,
        format!(
            "C=[1 1]: Ka={:.6} Kb={:.6} dist={:.3e} thr={:.3e} differ={} |E_a|={:.2e} |E_b|={:.2e}; C=I2: dist={:.3e} thr={:.3e} ({:?}/{:?})",
            rank_def.ka[0],
            rank_def.kb[0],
            rank_def.distance,
            rank_def.threshold,
            rank_def.differ,
            rank_def.e_norm_a,
            rank_def.e_norm_b,
            full_rep.distance,
            full_rep.threshold,
            full_rep.terminated_a,
            full_rep.terminated_b
        ),
    )
}

fn criterion_11() -> Outcome {
    let sys = systems::example_one();
    let sim = ModelSimulator::new(&sys).unwrap();
    let k0 = systems::example_one_k0();
    let kstar = 4.0637;
    let exact = gradient::evaluate_with_gradient(&sys, &k0).unwrap().1.grad;
    let t = Instant::now();
    let mut aligned = 0;
    let mut converged = 0;
    let mut finals = Vec::new();
    for seed in 0..10u64 {
        let cfg = ZerothOrderConfig::reference(seed);
        let est = ZerothOrderEstimator { sim: &sim, cfg };
        let g = sof_core::modelfree::GradientOracle::estimate(&est, &k0, u64::MAX).unwrap();
        if modelfree::cosine_similarity(&g.grad, &exact) >= 0.95 {
            aligned += 1;
        }
        let settings = ModelFreeSettings {
            method: Method::Vanilla,
            step_size: cfg.step_size,
            epsilon: 1e-8,
            max_iters: 150,
            seed,
        };
        let log = modelfree::run_modelfree(&est, Some(&sys), &k0, settings).unwrap();
        let hit = log
            .records
            .iter()
            .any(|r| (r.k[0] - kstar).abs() / kstar <= 5e-2);
        if hit {
            converged += 1;
        }
        finals.push(format!("{:.4}", log.final_gain().matrix()[(0, 0)]));
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        aligned >= 8 && converged >= 8 && secs < 300.0,
        format!(
            "cosine >= 0.95 in {aligned}/10 seeds; rel policy error <= 5e-2 within 150 iters in {converged}/10 seeds; final K [{}]; {secs:.1}s",
            finals.join(", ")
        ),
    )
}

fn criterion_12() -> Outcome {
    let sys = systems::example_one();
    let (lo, hi) = systems::EXAMPLE_ONE_STABILIZING;
    let costs = |f: &dyn Fn(f64) -> f64| -> Vec<f64> {
        (1..=6)
            .map(|k| lyapunov::cost(&sys, &Gain::scalar(f(10f64.powi(-k))).unwrap()).unwrap())
            .collect()
    };
    let left = costs(&|d| lo + d);
    let right = costs(&|d| hi - d);
    let increasing = |v: &[f64]| v.windows(2).all(|w| w[1] > w[0]);
    outcome(
        increasing(&left) && increasing(&right),
        format!(
            "J(2.1+1e-k): {:.4e} .. {:.4e}; J(22.05-1e-k): {:.4e} .. {:.4e}",
            left[0], left[5], right[0], right[5]
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("Example I reproduction", criterion_1),
        ("Example II reproduction", criterion_2),
        ("gradient correctness", criterion_3),
        ("Hessian correctness", criterion_4),
        ("performance-difference identity", criterion_5),
        ("bound certificates", criterion_6),
        ("descent inequality", criterion_7),
        ("iteration budgets", criterion_8),
        ("local convergence envelope", criterion_9),
        ("initial-distribution sensitivity", criterion_10),
        ("model-free estimation and convergence", criterion_11),
        ("coercivity sweep", criterion_12),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let out = f();
        let status = if out.passed { "PASS" } else { "FAIL" };
        if !out.passed {
            failed += 1;
        }
        println!(
            "criterion {:>2} [{status}] {name} ({:.2}s): {}",
            i + 1,
            t.elapsed().as_secs_f64(),
            out.detail
        );
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
