use proptest::prelude::*;
use sof_core::gradient;
use sof_core::linalg::{self, Mat};
use sof_core::lyapunov;
use sof_core::model;
use sof_core::optimize::Method;
use sof_core::systems;
use sof_core::Gain;

/// Square matrix with spectral radius scaled to `rho`.
fn stable_matrix(n: usize, rho: f64) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-1.0..1.0f64, n * n).prop_filter_map("nonzero spectrum", move |v| {
        let a = Mat::from_row_slice(n, n, &v);
        let r = linalg::spectral_radius(&a).ok()?;
        (r > 1e-3).then(|| a * (rho / r))
    })
}

fn spd_matrix(n: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-1.0..1.0f64, n * n).prop_map(move |v| {
        let g = Mat::from_row_slice(n, n, &v);
        &g * g.transpose() + Mat::identity(n, n) * 0.1
    })
}

/// Gains near the reference initial gain of example two that stabilize it.
fn example_two_gain() -> impl Strategy<Value = Gain> {
    prop::collection::vec(-0.3..0.3f64, 4).prop_filter_map("stabilizing", |d| {
        let k0 = systems::example_two_k0();
        let k = Gain::new(k0.matrix() + Mat::from_row_slice(2, 2, &d)).ok()?;
        let sys = systems::example_two();
        model::stability(&sys, &k).ok()?.stabilizing.then_some(k)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kronecker_and_doubling_solvers_agree(
        (a, s) in (1usize..=5).prop_flat_map(|n| (stable_matrix(n, 0.95), spd_matrix(n))),
        transpose_form in any::<bool>(),
    ) {
        let x = lyapunov::solve_dlyap(&a, &s, transpose_form).unwrap();
        let y = lyapunov::solve_dlyap_doubling(&a, &s, transpose_form).unwrap();
        prop_assert!((&x - &y).norm() <= 1e-9 * x.norm());
        prop_assert!(linalg::sym_min_eig(&x) > 0.0);
        prop_assert_eq!(&x, &x.transpose());
    }

    #[test]
    fn cost_has_primal_and_dual_forms(k in example_two_gain()) {
        let sys = systems::example_two();
        let ev = lyapunov::evaluate(&sys, &k).unwrap();
        let w = lyapunov::stage_weight(&sys, &k);
        let dual = (w * &ev.sigma).trace();
        prop_assert!((ev.cost - dual).abs() <= 1e-10 * ev.cost);
    }

    #[test]
    fn gradient_matches_directional_difference(k in example_two_gain(), dir in prop::collection::vec(-1.0..1.0f64, 4)) {
        let sys = systems::example_two();
        let z = Mat::from_row_slice(2, 2, &dir);
        prop_assume!(z.norm() > 0.1);
        let (_, g) = gradient::evaluate_with_gradient(&sys, &k).unwrap();
        let h = 1e-6;
        let jp = lyapunov::cost(&sys, &k.step(&z, -h).unwrap()).unwrap();
        let jm = lyapunov::cost(&sys, &k.step(&z, h).unwrap()).unwrap();
        let fd = (jp - jm) / (2.0 * h);
        let analytic = g.grad.dot(&z);
        prop_assert!((fd - analytic).abs() <= 1e-6 * g.grad.norm() * z.norm() + 1e-9, "{} vs {}", fd, analytic);
    }

    #[test]
    fn every_method_direction_is_a_descent_direction(k in example_two_gain()) {
        let sys = systems::example_two();
        let (_, g) = gradient::evaluate_with_gradient(&sys, &k).unwrap();
        for method in Method::ALL {
            let d = method.direction(&g);
            prop_assert!(g.grad.dot(d) > 0.0, "{method}");
        }
    }

    #[test]
    fn hessian_is_symmetric_and_matches_quadratic_form(k in example_two_gain(), dir in prop::collection::vec(-1.0..1.0f64, 4)) {
        let sys = systems::example_two();
        let z = Mat::from_row_slice(2, 2, &dir);
        let h = gradient::hessian_matrix(&sys, &k).unwrap();
        let mat = &h.h;
        prop_assert!((mat - mat.transpose()).norm() <= 1e-9 * mat.norm());
        let q = gradient::hessian_quadratic(&sys, &k, &z).unwrap();
        let v = linalg::vec_col(&z);
        let assembled = (v.transpose() * mat * &v)[(0, 0)];
        prop_assert!((q - assembled).abs() <= 1e-9 * (q.abs() + mat.norm() * v.norm_squared()));
    }

    #[test]
    fn scalar_example_is_stable_exactly_inside_the_interval(k in 0.0..25.0f64) {
        let (lo, hi) = systems::EXAMPLE_ONE_STABILIZING;
        prop_assume!((k - lo).abs() > 1e-3 && (k - hi).abs() > 1e-3);
        let stab = model::stability(&systems::example_one(), &Gain::scalar(k).unwrap()).unwrap();
        prop_assert_eq!(stab.stabilizing, k > lo && k < hi);
    }

    #[test]
    fn system_files_round_trip(k in 2.2..22.0f64) {
        let sys = systems::example_one();
        let text = serde_json::to_string(&sys.to_file()).unwrap();
        let back = sof_core::LtiSystem::from_json_str(&text).unwrap();
        prop_assert_eq!(&back, &sys);
        let g = Gain::scalar(k).unwrap();
        prop_assert_eq!(lyapunov::cost(&sys, &g).unwrap(), lyapunov::cost(&back, &g).unwrap());
    }
}
