//! Grid value function against closed forms, derivative queries, and the one-sided tests.

mod common;

use common::*;
use mayer_sens::characteristics::integrate_characteristics;
use mayer_sens::hamiltonian::{sample_points, ControlScenario, TerminalCost};
use mayer_sens::hjb::{
    solve_value_function, test_first_order, test_jet, FirstOrderKind, JetCandidate, JetKind, ProbeConfig,
};
use mayer_sens::{Error, Vector, Verdict};

/// Largest error over uncontaminated nodes of every slice.
fn box_interior_error(points: usize, steps: usize) -> f64 {
    let g = solve_value_function(&box_1d(), &box_spec(points, steps), 2).unwrap();
    let mut worst: f64 = 0.0;
    for k in 0..=steps {
        let t = g.spec.slice_time(k);
        for i in 0..g.spec.node_count() {
            if !g.contaminated[k][i] {
                worst = worst.max((g.values[k][i] - box_value(t, g.spec.node(i)[0])).abs());
            }
        }
    }
    worst
}

#[test]
fn box_value_function_converges_at_first_order() {
    let coarse = box_interior_error(401, 400);
    let fine = box_interior_error(801, 800);
    assert!(coarse <= 2e-2, "error {coarse}");
    assert!(coarse / fine >= 1.7, "ratio {}", coarse / fine);
    assert!(coarse <= box_grid().error_budget);
}

#[test]
fn final_slice_is_the_cost_bit_for_bit() {
    let g = box_grid();
    let sc = box_1d();
    let last = g.spec.time_steps;
    for i in 0..g.spec.node_count() {
        assert_eq!(g.values[last][i], sc.cost.value(&g.spec.node(i)));
    }
}

#[test]
fn zero_cost_gives_zero_value() {
    let base = box_1d();
    let cost = TerminalCost::quadratic(m1(0.0), Vector::zeros(1), 0.0);
    let sc = ControlScenario::new(base.model, cost, 0.0, 1.0, v1(0.0), "zero").unwrap();
    let g = solve_value_function(&sc, &box_spec(201, 100), 2).unwrap();
    assert!(g.values.iter().flatten().all(|v| *v == 0.0));
    assert_eq!(g.numerical_gradient(0.5, &v1(0.3)).unwrap()[0], 0.0);
    assert_eq!(g.numerical_hessian(0.5, &v1(0.3)).unwrap()[(0, 0)], 0.0);
}

#[test]
fn box_derivatives_at_start() {
    let g = box_grid();
    let grad = g.numerical_gradient(0.0, &v1(2.0)).unwrap();
    assert!((grad[0] - 2.0).abs() <= 5e-2);
    let hess = g.numerical_hessian(0.0, &v1(2.0)).unwrap();
    assert!((hess[(0, 0)] - 2.0).abs() <= 1e-1);
    assert!((g.interpolate(0.0, &v1(2.0)).unwrap() - 1.0).abs() <= g.error_budget);
}

#[test]
fn queries_off_the_clean_region_are_refused() {
    let g = box_grid();
    assert!(matches!(g.interpolate(0.0, &v1(3.5)), Err(Error::OutOfDomain(_))));
    assert!(matches!(g.interpolate(1.5, &v1(0.0)), Err(Error::OutOfDomain(_))));
    // the outermost nodes see the zero-gradient boundary within one step
    assert!(g.contaminated[0][g.spec.node_count() - 1]);
    assert!(matches!(g.interpolate(0.0, &v1(2.999)), Err(Error::ContaminatedRegion(_))));
}

#[test]
fn ball_value_function_at_probe_points() {
    let sc = ball_2d().restarted(0.0, v2(0.5, 0.0)).unwrap();
    let g = solve_value_function(&sc, &ball_spec(201, 100, 0.0), 64).unwrap();
    let mut worst: f64 = 0.0;
    let pts: Vec<Vector> = sample_points(5, 200, 2, 1.5).into_iter().filter(|p| p.norm() >= 0.3).take(20).collect();
    assert_eq!(pts.len(), 20);
    for (k, x) in pts.iter().enumerate() {
        let t = 0.25 * (k % 4) as f64;
        worst = worst.max((g.interpolate(t, x).unwrap() - ball_value(t, x)).abs());
    }
    assert!(worst <= 5e-2, "error {worst}");

    // V(t0, x0) equals phi at the end of the optimal characteristic
    let arc = integrate_characteristics(&sc, &v2(1.5, 0.0), 1000).unwrap();
    assert!((arc.initial().0 - v2(0.5, 0.0)).norm() < 1e-12);
    let phi_end = sc.cost.value(arc.terminal().0);
    assert!((g.interpolate(0.0, &v2(0.5, 0.0)).unwrap() - phi_end).abs() <= 5e-2);
}

#[test]
fn first_order_examples() {
    let g = box_grid();
    let probe = ProbeConfig::default();
    let x = v1(2.0);
    let prox = test_first_order(g, 0.0, &x, &v1(2.0), FirstOrderKind::ProxSub, &probe).unwrap();
    assert_eq!(prox.verdict, Verdict::Pass);
    assert!(prox.fitted_constants["c_prox"] <= 1e-6);

    let wrong = test_first_order(g, 0.0, &x, &v1(2.5), FirstOrderKind::Sub, &probe).unwrap();
    assert_eq!(wrong.verdict, Verdict::Fail);
    let eta = &wrong.tables["radii"];
    assert!((eta.last().unwrap()[1] - 0.5).abs() <= 0.05);

    for (t, y) in [(0.0, 2.0), (0.3, 1.5), (0.5, -1.2)] {
        let y = v1(y);
        let q = g.numerical_gradient(t, &y).unwrap();
        for kind in [FirstOrderKind::Sub, FirstOrderKind::Super] {
            assert_eq!(test_first_order(g, t, &y, &q, kind, &probe).unwrap().verdict, Verdict::Pass);
        }
    }
}

fn jet(t: f64, x: f64, q: f64, big_q: f64, kind: JetKind) -> JetCandidate {
    JetCandidate::new(t, v1(x), v1(q), m1(big_q), kind).unwrap()
}

#[test]
fn jet_examples() {
    let g = box_grid();
    let probe = ProbeConfig::default();
    let exact = test_jet(g, &jet(0.0, 2.0, 2.0, 2.0, JetKind::Subjet), &probe).unwrap();
    assert_eq!(exact.verdict, Verdict::Pass);
    assert!(exact.tables["m_k"].iter().all(|row| row[1].abs() <= 1e-3));

    let perturbed = test_jet(g, &jet(0.0, 2.0, 2.0, 2.5, JetKind::Subjet), &probe).unwrap();
    assert_eq!(perturbed.verdict, Verdict::Fail);
    assert!((perturbed.fitted_constants["m_finest"] + 0.25).abs() <= 0.05);

    let sup = test_jet(g, &jet(0.0, 2.0, 2.0, 3.0, JetKind::Superjet), &probe).unwrap();
    assert_eq!(sup.verdict, Verdict::Pass);
}

#[test]
fn jet_consistency_pins_the_gradient() {
    let g = box_grid();
    let probe = ProbeConfig::default();
    let (t, x) = (0.25, 1.6);
    let q = g.numerical_gradient(t, &v1(x)).unwrap()[0];
    let sub = test_jet(g, &jet(t, x, q, 1.5, JetKind::Subjet), &probe).unwrap();
    let sup = test_jet(g, &jet(t, x, q, 2.5, JetKind::Superjet), &probe).unwrap();
    assert!(sub.passed() && sup.passed());
    let budget = g.gradient_budget(t, &v1(x)).unwrap();
    assert!((q - 2.0 * (x + t - 1.0)).abs() <= 2.0 * budget);
    // a slope off by far more than the budget is refused by both sides
    let off = q + 0.5;
    let sub = test_jet(g, &jet(t, x, off, 1.5, JetKind::Subjet), &probe).unwrap();
    let sup = test_jet(g, &jet(t, x, off, 2.5, JetKind::Superjet), &probe).unwrap();
    assert!(!(sub.passed() && sup.passed()));
}

#[test]
fn ball_gradient_and_kink() {
    let g = ball_grid();
    // tangential and radial derivatives of -(|x| + 1 - t)^2 / 2 at (0.5, (0.5, 0))
    let grad = g.numerical_gradient(0.5, &v2(0.5, 0.0)).unwrap();
    assert!((grad[0] + 1.0).abs() <= 5e-2 && grad[1].abs() <= 5e-2, "{grad:?}");
    let hess = g.numerical_hessian(0.5, &v2(0.5, 0.0)).unwrap();
    // radial curvature is clean; the tangential one is smeared by the kink at the origin
    assert!((hess[(0, 0)] + 1.0).abs() <= 5e-2, "{hess}");
    assert!((hess[(1, 1)] + 2.0).abs() <= 0.3 * 2.0, "{hess}");
    assert!(hess[(0, 1)].abs() <= 1e-6);
}
