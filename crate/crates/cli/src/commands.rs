use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use sof_core::gradient;
use sof_core::landscape;
use sof_core::linalg;
use sof_core::lyapunov;
use sof_core::model::{self, validate_system};
use sof_core::modelfree::{self, ModelFreeSettings, ModelSimulator, ZerothOrderConfig, ZerothOrderEstimator};
use sof_core::optimize::{self, fmt_f64, Method, OptimizerConfig, RunLog, StepSize};
use sof_core::systems;
use sof_core::{Gain, LtiSystem, SofError};

use crate::args::{Command, Example};
use crate::config::{self, CliError, ExperimentConfig, EXIT_RUNTIME, EXIT_VALIDATION};
use crate::output::{finite, to_json, write_atomic, write_json};

/// Step size used by the reference experiments.
pub const REFERENCE_ETA: f64 = 0.2;
pub const REPRODUCE_MODEL_BASED_ITERS: usize = 1000;
pub const REPRODUCE_MODEL_FREE_ITERS: usize = 150;
pub const MODEL_FREE_DEFAULT_ITERS: usize = 150;
pub const GRAD_CHECK_STEP: f64 = 1e-6;
pub const GRAD_CHECK_TOL: f64 = 1e-6;
pub const DEFAULT_CERTIFICATE_SAMPLES: usize = 100;
pub const GAMMA_SAMPLES: usize = 10_000;

pub fn dispatch(cfg: &ExperimentConfig) -> Result<u8, CliError> {
    match cfg.command {
        Command::Validate => validate(cfg),
        Command::Eval => eval(cfg),
        Command::GradCheck => grad_check(cfg),
        Command::Optimize => optimize_cmd(cfg),
        Command::Modelfree => modelfree_cmd(cfg),
        Command::Landscape => landscape_cmd(cfg),
        Command::Sweep => sweep(cfg),
        Command::Reproduce => reproduce(cfg),
    }
}

fn print(value: &impl Serialize) {
    print!("{}", to_json(value));
}

fn validate(cfg: &ExperimentConfig) -> Result<u8, CliError> {
    let sys = match cfg.system() {
        Ok(sys) => sys,
        Err(e) if e.code == EXIT_VALIDATION => {
            print(&json!({ "passed": false, "error": e.message }));
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    let report = validate_system(&sys);
    print(&report);
    Ok(if report.passed { 0 } else { EXIT_VALIDATION })
}

fn eval(cfg: &ExperimentConfig) -> Result<u8, CliError> {
    let sys = cfg.system()?;
    let k = cfg.gain(&sys)?;
    let stab = model::stability(&sys, &k)?;
    let mut report = json!({
        "gain": linalg::to_rows(k.matrix()),
        "stabilizing": stab.stabilizing,
        "spectral_radius": stab.spectral_radius,
        "margin": stab.margin,
        "cost": Value::Null,
        "grad_norm": Value::Null,
    });
    if stab.stabilizing {
        let (ev, g) = gradient::evaluate_with_gradient(&sys, &k)?;
        report["cost"] = json!(ev.cost);
        report["grad_norm"] = json!(g.grad_norm);
        report["gradient"] = json!(linalg::to_rows(&g.grad));
    }
    print(&report);
    Ok(0)
}

fn grad_check(cfg: &ExperimentConfig) -> Result<u8, CliError> {
    let sys = cfg.system()?;
    let k = cfg.gain(&sys)?;
    let (_, g) = gradient::evaluate_with_gradient(&sys, &k)?;
    let h = GRAD_CHECK_STEP;
    let mut fd = linalg::Mat::zeros(k.rows(), k.cols());
    for r in 0..k.rows() {
        for c in 0..k.cols() {
            let mut e = linalg::Mat::zeros(k.rows(), k.cols());
            e[(r, c)] = 1.0;
            let plus = lyapunov::cost(&sys, &k.step(&e, -h)?)?;
            let minus = lyapunov::cost(&sys, &k.step(&e, h)?)?;
            fd[(r, c)] = (plus - minus) / (2.0 * h);
        }
    }
    let rel = (&fd - &g.grad).norm() / g.grad.norm();
    let passed = rel <= GRAD_CHECK_TOL;
    print(&json!({
        "analytic": linalg::to_rows(&g.grad),
        "finite_difference": linalg::to_rows(&fd),
        "step": h,
        "relative_error": finite(rel),
        "tolerance": GRAD_CHECK_TOL,
        "passed": passed,
    }));
    Ok(if passed { 0 } else { EXIT_RUNTIME })
}

fn run_summary(log: &RunLog) -> Value {
    let last = log.last();
    json!({
        "method": log.method,
        "eta": log.eta,
        "epsilon": log.epsilon,
        "iterations": log.iterations(),
        "terminated_by": log.terminated_by,
        "theoretical_budget": log.theoretical_budget,
        "seed": log.seed,
        "final_gain": linalg::to_rows(log.final_gain().matrix()),
        "final_cost": finite(last.j),
        "final_grad_norm": finite(last.grad_norm),
        "final_method_grad_norm": finite(last.method_grad_norm),
        "halvings": log.records.iter().map(|r| r.halvings as u64).sum::<u64>(),
    })
}

fn optimize_cmd(cfg: &ExperimentConfig) -> Result<u8, CliError> {
    let sys = cfg.system()?;
    let k0 = cfg.gain(&sys)?;
    let method = cfg.method.unwrap_or(Method::Vanilla);
    let mut oc = OptimizerConfig::new(method, cfg.step_size(StepSize::Fixed(REFERENCE_ETA))?);
    if let Some(e) = cfg.cli().epsilon {
        oc.epsilon = e;
    }
    if let Some(n) = cfg.cli().max_iters {
        oc.max_iters = n;
    }
    let log = optimize::run(&sys, &k0, oc)
        .map_err(|e| CliError::runtime(format!("{method} run failed: {e}")))?;
    if let Some(dir) = &cfg.output_dir {
        write_atomic(&dir.join(format!("optimize_{method}.csv")), log.to_csv().as_bytes())?;
        write_json(&dir.join(format!("optimize_{method}.json")), &run_summary(&log))?;
    }
    print(&run_summary(&log));
    Ok(0)
}

fn zeroth_order_config(cfg: &ExperimentConfig, seed: u64) -> Result<ZerothOrderConfig, CliError> {
    let mut zc = ZerothOrderConfig::reference(seed);
    let cli = cfg.cli();
    if let Some(z) = cli.z {
        zc.num_trajectories = z;
    }
    if let Some(l) = cli.l {
        zc.rollout_length = l;
    }
    if let Some(r) = cli.r {
        zc.perturbation_radius = r;
    }
    match cfg.step_size(StepSize::Fixed(REFERENCE_ETA))? {
        StepSize::Fixed(eta) => zc.step_size = eta,
        StepSize::Auto => return Err(CliError::bad_args("model-free runs need a numeric --eta")),
    }
    Ok(zc)
}

fn modelfree_runs(
    sys: &LtiSystem,
    k0: &Gain,
    method: Method,
    seeds: &[u64],
    zc: impl Fn(u64) -> Result<ZerothOrderConfig, CliError> + Sync,
    epsilon: f64,
    max_iters: usize,
) -> Result<Vec<RunLog>, CliError> {
    let sim = ModelSimulator::new(sys)?;
    seeds
        .par_iter()
        .map(|&seed| {
            let zcfg = zc(seed)?;
            let est = ZerothOrderEstimator { sim: &sim, cfg: zcfg };
            let settings = ModelFreeSettings {
                method,
                step_size: zcfg.step_size,
                epsilon,
                max_iters,
                seed,
            };
            modelfree::run_modelfree(&est, Some(sys), k0, settings)
                .map_err(|e| CliError::runtime(format!("model-free {method} (seed {seed}) failed: {e}")))
        })
        .collect()
}

fn modelfree_cmd(cfg: &ExperimentConfig) -> Result<u8, CliError> {
    let sys = cfg.system()?;
    let k0 = cfg.gain(&sys)?;
    let method = cfg.method.unwrap_or(Method::Vanilla);
    if method == Method::GaussNewton {
        return Err(CliError::bad_args("gauss_newton has no model-free form; use vanilla or natural"));
    }
    zeroth_order_config(cfg, 0)?.validate()?;
    let logs = modelfree_runs(
        &sys,
        &k0,
        method,
        &cfg.seeds,
        |s| zeroth_order_config(cfg, s),
        cfg.cli().epsilon.unwrap_or(optimize::DEFAULT_EPSILON),
        cfg.cli().max_iters.unwrap_or(MODEL_FREE_DEFAULT_ITERS),
    )?;
    if let Some(dir) = &cfg.output_dir {
        for log in &logs {
            let seed = log.seed.unwrap_or_default();
            write_atomic(
                &dir.join(format!("modelfree_{method}_seed{seed}.csv")),
                log.to_csv().as_bytes(),
            )?;
        }
    }
    let zc = zeroth_order_config(cfg, 0)?;
    print(&json!({
        "method": method,
        "x0_distribution": "gaussian(0, X0)",
        "num_trajectories": zc.num_trajectories,
        "rollout_length": zc.rollout_length,
        "perturbation_radius": zc.perturbation_radius,
        "runs": logs.iter().map(run_summary).collect::<Vec<_>>(),
    }));
    Ok(0)
}

fn landscape_cmd(cfg: &ExperimentConfig) -> Result<u8, CliError> {
    let sys = cfg.system()?;
    let k0 = cfg.gain(&sys)?;
    let j0 = lyapunov::cost(&sys, &k0)?;
    let alpha = cfg.cli().alpha.unwrap_or(j0);
    if j0 > alpha {
        return Err(CliError::bad_args(format!(
            "the gain has cost {j0}, outside the sublevel set at alpha = {alpha}"
        )));
    }
    let samples = cfg.cli().samples.unwrap_or(DEFAULT_CERTIFICATE_SAMPLES);
    let seed = cfg.seeds[0];
    let report = match landscape::certify(&sys, &k0, alpha, samples, GAMMA_SAMPLES, seed) {
        Ok(suite) => json!({
            "alpha": alpha,
            "constants": suite.constants,
            "certificates": suite.certificates,
            "all_passed": suite.all_passed(),
            "warning": Value::Null,
        }),
        Err(SofError::ConstantsUnavailable { reason }) => json!({
            "alpha": alpha,
            "constants": Value::Null,
            "certificates": [],
            "all_passed": Value::Null,
            "warning": format!("landscape constants unavailable: {reason}"),
        }),
        Err(e) => return Err(e.into()),
    };
    if let Some(dir) = &cfg.output_dir {
        write_json(&dir.join("landscape.json"), &report)?;
    }
    print(&report);
    Ok(0)
}

#[derive(Debug, Serialize)]
struct SweepPoint {
    k: f64,
    stabilizing: bool,
    rho: f64,
    cost: Option<f64>,
    grad_norm: Option<f64>,
}

fn sweep(cfg: &ExperimentConfig) -> Result<u8, CliError> {
    let sys = cfg.system()?;
    if sys.m() * sys.d() != 1 {
        return Err(CliError::bad_args("sweep needs a scalar gain (m = d = 1)"));
    }
    let raw = cfg
        .cli()
        .grid
        .as_deref()
        .ok_or_else(|| CliError::bad_args("--grid LO:HI:N is required"))?;
    let (lo, hi, n) = config::parse_grid(raw)?;
    let points: Vec<SweepPoint> = (0..n)
        .into_par_iter()
        .map(|i| {
            let k = lo + (hi - lo) * i as f64 / (n - 1) as f64;
            let gain = Gain::scalar(k)?;
            let stab = model::stability(&sys, &gain)?;
            let (cost, grad_norm) = if stab.stabilizing {
                let (ev, g) = gradient::evaluate_with_gradient(&sys, &gain)?;
                (Some(ev.cost), Some(g.grad_norm))
            } else {
                (None, None)
            };
            Ok(SweepPoint {
                k,
                stabilizing: stab.stabilizing,
                rho: stab.spectral_radius,
                cost,
                grad_norm,
            })
        })
        .collect::<Result<_, SofError>>()?;

    let mut csv = String::from("K,J,grad_norm,rho,stabilizing\n");
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    for p in &points {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            fmt_f64(p.k),
            opt(p.cost),
            opt(p.grad_norm),
            fmt_f64(p.rho),
            p.stabilizing
        );
    }
    if let Some(dir) = &cfg.output_dir {
        write_atomic(&dir.join("sweep.csv"), csv.as_bytes())?;
    }
    let best = points
        .iter()
        .filter_map(|p| p.cost.map(|c| (p.k, c)))
        .min_by(|a, b| a.1.total_cmp(&b.1));
    print(&json!({
        "points": n,
        "stabilizing": points.iter().filter(|p| p.stabilizing).count(),
        "argmin_k": best.map(|b| b.0),
        "min_cost": best.map(|b| b.1),
    }));
    if cfg.output_dir.is_none() {
        print!("{csv}");
    }
    Ok(0)
}

struct Reference {
    name: &'static str,
    sys: LtiSystem,
    k0: Gain,
    kstar: Gain,
    jstar: f64,
}

fn reference(example: Example) -> Result<Reference, CliError> {
    let (name, sys, k0, kstar) = match example {
        Example::One => (
            "one",
            systems::example_one(),
            systems::example_one_k0(),
            systems::example_one_kstar(),
        ),
        Example::Two => (
            "two",
            systems::example_two(),
            systems::example_two_k0(),
            systems::example_two_kstar(),
        ),
    };
    let jstar = lyapunov::cost(&sys, &kstar)?;
    Ok(Reference {
        name,
        sys,
        k0,
        kstar,
        jstar,
    })
}

/// `(||K - K*|| / ||K*||, |J - J*| / |J*|)` per iterate.
fn errors(log: &RunLog, r: &Reference) -> Vec<(f64, f64)> {
    let knorm = r.kstar.matrix().norm();
    (0..log.records.len())
        .map(|i| {
            (
                log.gain_at(i).distance(&r.kstar) / knorm,
                (log.records[i].j - r.jstar).abs() / r.jstar.abs(),
            )
        })
        .collect()
}

fn min_max(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    values.fold(None, |acc, v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    })
}

fn reproduce(cfg: &ExperimentConfig) -> Result<u8, CliError> {
    let example = match &cfg.source {
        Some(config::SystemSource::Bundled(e)) => *e,
        _ => return Err(CliError::bad_args("reproduce needs --example one|two")),
    };
    let r = reference(example)?;
    let dir = cfg
        .output_dir
        .clone()
        .unwrap_or_else(|| format!("reproduce-{}", r.name).into());
    std::fs::create_dir_all(&dir)?;

    let model_based: Vec<(Method, RunLog)> = Method::ALL
        .par_iter()
        .map(|&m| {
            let oc = OptimizerConfig::new(m, StepSize::Fixed(REFERENCE_ETA))
                .with_max_iters(REPRODUCE_MODEL_BASED_ITERS);
            optimize::run(&r.sys, &r.k0, oc)
                .map(|log| (m, log))
                .map_err(|e| CliError::runtime(format!("{m} run failed: {e}")))
        })
        .collect::<Result<_, _>>()?;

    let mut summary_mb = BTreeMap::new();
    for (m, log) in &model_based {
        let errs = errors(log, &r);
        let mut csv = String::from("iter,rel_policy_error,rel_cost_error\n");
        for (i, (pe, ce)) in errs.iter().enumerate() {
            let _ = writeln!(csv, "{i},{},{}", fmt_f64(*pe), fmt_f64(*ce));
        }
        write_atomic(&dir.join(format!("modelbased_{m}.csv")), csv.as_bytes())?;
        write_atomic(&dir.join("runs").join(format!("{m}.csv")), log.to_csv().as_bytes())?;
        let (pe, ce) = *errs.last().expect("non-empty run");
        summary_mb.insert(
            m.name(),
            json!({
                "final_rel_policy_error": pe,
                "final_rel_cost_error": ce,
                "iterations": log.iterations(),
                "terminated_by": log.terminated_by,
                "final_gain": linalg::to_rows(log.final_gain().matrix()),
            }),
        );
    }

    let mut summary_mf = BTreeMap::new();
    for m in [Method::Vanilla, Method::Natural] {
        let logs = modelfree_runs(
            &r.sys,
            &r.k0,
            m,
            &cfg.seeds,
            |s| zeroth_order_config(cfg, s),
            optimize::DEFAULT_EPSILON,
            REPRODUCE_MODEL_FREE_ITERS,
        )?;
        let errs: Vec<Vec<(f64, f64)>> = logs.iter().map(|l| errors(l, &r)).collect();
        let rows = errs.iter().map(Vec::len).max().unwrap_or(0);
        let mut csv = String::from("iter");
        for s in &cfg.seeds {
            let _ = write!(csv, ",policy_seed{s},cost_seed{s}");
        }
        csv.push_str(",policy_min,policy_max,cost_min,cost_max\n");
        for i in 0..rows {
            let _ = write!(csv, "{i}");
            for e in &errs {
                match e.get(i) {
                    Some((pe, ce)) => {
                        let _ = write!(csv, ",{},{}", fmt_f64(*pe), fmt_f64(*ce));
                    }
                    None => csv.push_str(",,"),
                }
            }
            let at_i = || errs.iter().filter_map(move |e| e.get(i));
            let (plo, phi) = min_max(at_i().map(|e| e.0)).expect("some seed reaches i");
            let (clo, chi) = min_max(at_i().map(|e| e.1)).expect("some seed reaches i");
            let _ = writeln!(csv, ",{},{},{},{}", fmt_f64(plo), fmt_f64(phi), fmt_f64(clo), fmt_f64(chi));
        }
        write_atomic(&dir.join(format!("modelfree_{m}.csv")), csv.as_bytes())?;
        for log in &logs {
            let seed = log.seed.unwrap_or_default();
            write_atomic(
                &dir.join("runs").join(format!("modelfree_{m}_seed{seed}.csv")),
                log.to_csv().as_bytes(),
            )?;
        }
        let finals: Vec<(f64, f64)> = errs.iter().map(|e| *e.last().expect("non-empty")).collect();
        let (plo, phi) = min_max(finals.iter().map(|f| f.0)).expect("at least one seed");
        let (clo, chi) = min_max(finals.iter().map(|f| f.1)).expect("at least one seed");
        summary_mf.insert(
            m.name(),
            json!({
                "seeds": cfg.seeds,
                "final_rel_policy_error": { "min": plo, "max": phi, "per_seed": finals.iter().map(|f| f.0).collect::<Vec<_>>() },
                "final_rel_cost_error": { "min": clo, "max": chi, "per_seed": finals.iter().map(|f| f.1).collect::<Vec<_>>() },
                "iterations": logs.iter().map(|l| l.iterations()).collect::<Vec<_>>(),
            }),
        );
    }

    let zc = zeroth_order_config(cfg, 0)?;
    let summary = json!({
        "example": r.name,
        "k0": linalg::to_rows(r.k0.matrix()),
        "k_star": linalg::to_rows(r.kstar.matrix()),
        "j_star": r.jstar,
        "eta": REFERENCE_ETA,
        "model_based_max_iters": REPRODUCE_MODEL_BASED_ITERS,
        "model_free": {
            "max_iters": REPRODUCE_MODEL_FREE_ITERS,
            "num_trajectories": zc.num_trajectories,
            "rollout_length": zc.rollout_length,
            "perturbation_radius": zc.perturbation_radius,
            "x0_distribution": "gaussian(0, X0)",
        },
        "model_based_results": summary_mb,
        "model_free_results": summary_mf,
    });
    write_json(&dir.join("summary.json"), &summary)?;
    write_atomic(&dir.join("plot_learning_curves.py"), PLOT_SCRIPT.as_bytes())?;
    print(&summary);
    Ok(0)
}

const PLOT_SCRIPT: &str = r#"# Generated by `sof reproduce`. Plots the learning curves in this directory.
import csv
import sys
from pathlib import Path

import matplotlib.pyplot as plt

HERE = Path(__file__).resolve().parent


def columns(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return {k: [float(r[k]) if r[k] else float("nan") for r in rows] for k in rows[0]}


def main():
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for method in ("vanilla", "natural", "gauss_newton"):
        c = columns(HERE / f"modelbased_{method}.csv")
        axes[0].semilogy(c["iter"], c["rel_policy_error"], label=method)
        axes[1].semilogy(c["iter"], c["rel_cost_error"], label=method)
    for method in ("vanilla", "natural"):
        c = columns(HERE / f"modelfree_{method}.csv")
        for ax, key in ((axes[0], "policy"), (axes[1], "cost")):
            ax.fill_between(c["iter"], c[f"{key}_min"], c[f"{key}_max"], alpha=0.3,
                            label=f"model-free {method}")
    axes[0].set_ylabel("relative policy error")
    axes[1].set_ylabel("relative cost error")
    for ax in axes:
        ax.set_xlabel("iteration")
        ax.legend()
    out = HERE / "learning_curves.png"
    fig.tight_layout()
    fig.savefig(out, dpi=150)
    print(out, file=sys.stderr)


if __name__ == "__main__":
    main()
"#;
