//! Sensitivity relations along optimal arcs, checked against grid value functions.

mod common;

use common::*;
use mayer_sens::hamiltonian::{ControlScenario, TerminalCost};
use mayer_sens::hjb::solve_value_function;
use mayer_sens::riccati::{integrate_riccati_direct, Anchor, RiccatiStatus};
use mayer_sens::sensitivity::*;
use mayer_sens::{Error, Matrix, Vector, Verdict};

fn opts(steps: usize) -> VerifyOptions {
    VerifyOptions { steps, ..VerifyOptions::default() }
}

fn premise_reason(res: mayer_sens::Result<mayer_sens::VerificationReport>) -> String {
    match res {
        Err(Error::PremiseFailed { reason, .. }) => reason,
        other => panic!("expected a premise failure, got {other:?}"),
    }
}

#[test]
fn box_gradient_and_first_order() {
    let (sc, g) = (box_1d(), box_grid());
    let grad = verify_gradient_propagation(&sc, g, &opts(1000)).unwrap();
    assert_eq!(grad.verdict, Verdict::Pass);
    assert!(grad.fitted_constants["max_gradient_mismatch"] <= 5e-2);

    let first = verify_first_order_propagation(&sc, g, &opts(1000)).unwrap();
    assert_eq!(first.verdict, Verdict::Pass);
    assert!(first.fitted_constants["c_prox_uniform"] <= 1e-6);

    let wrong = VerifyOptions { candidate_sign: 1.0, ..opts(1000) };
    assert_eq!(verify_first_order_propagation(&sc, g, &wrong).unwrap().verdict, Verdict::Fail);
}

#[test]
fn box_subjet_premises() {
    let (sc, g) = (box_1d(), box_grid());
    for r0 in [-2.0, -1.5] {
        let rep = verify_subjet_propagation(&sc, g, &m1(r0), &opts(1000)).unwrap();
        assert_eq!(rep.verdict, Verdict::Pass, "R0 = {r0}: {:?}", rep.notes);
    }
    let reason = premise_reason(verify_subjet_propagation(&sc, g, &m1(-2.5), &opts(1000)));
    assert!(reason.contains("not a subjet"), "{reason}");
}

#[test]
fn box_superjets_and_hessians() {
    let (sc, g) = (box_1d(), box_grid());
    for q in [2.0, 3.0] {
        let rep = verify_superjet_propagation(&sc, g, Some(&m1(q)), &opts(1000)).unwrap();
        assert_eq!(rep.verdict, Verdict::Pass, "Q = {q}");
    }
    // below the cost's curvature is not a superjet of phi
    assert!(matches!(verify_superjet_propagation(&sc, g, Some(&m1(1.5)), &opts(1000)), Err(Error::PremiseFailed { .. })));
    for dir in [PropagationDirection::Forward, PropagationDirection::Backward] {
        let rep = verify_hessian_propagation(&sc, g, dir, &opts(1000)).unwrap();
        assert_eq!(rep.verdict, Verdict::Pass, "{dir:?}");
        assert!(rep.fitted_constants["max_relative_hessian_error"] <= 1e-1);
    }
    let c2 = probe_c2_regularity(&sc, g, &opts(1000)).unwrap();
    assert_eq!(c2.verdict, Verdict::Pass);
}

#[test]
fn box_kink_restart_is_refused_and_smooth_side_passes() {
    let g = box_grid();
    let kink = box_1d().restarted(0.5, v1(0.5)).unwrap();
    let reason = premise_reason(probe_c2_regularity(&kink, g, &opts(1000)));
    assert!(reason.contains("q = 0 is excluded"), "{reason}");
    let smooth = box_1d().restarted(0.5, v1(1.0)).unwrap();
    assert_eq!(probe_c2_regularity(&smooth, g, &opts(1000)).unwrap().verdict, Verdict::Pass);
}

#[test]
fn linear_cost_has_zero_proximal_constant() {
    let base = box_1d();
    let cost = TerminalCost::quadratic(m1(0.0), v1(1.0), 0.0);
    let sc = ControlScenario::new(base.model, cost, 0.0, 1.0, v1(0.5), "linear").unwrap();
    let g = solve_value_function(&sc, &box_spec(401, 400), 2).unwrap();
    let rep = verify_first_order_propagation(&sc, &g, &opts(1000)).unwrap();
    assert_eq!(rep.verdict, Verdict::Pass);
    assert!(rep.fitted_constants["c_prox_uniform"] <= 1e-9);
    let hess = verify_hessian_propagation(&sc, &g, PropagationDirection::Backward, &opts(1000)).unwrap();
    assert_eq!(hess.verdict, Verdict::Pass);
}

#[test]
fn ball_superjet_reports_frontier_at_the_conjugate_time() {
    let (sc, g) = (ball_2d(), ball_grid());
    let o = opts(3000);
    let rep = verify_superjet_propagation(&sc, g, None, &o).unwrap();
    assert_eq!(rep.verdict, Verdict::Pass, "{:?}", rep.notes);
    let frontier = rep.fitted_constants["frontier"];
    assert!(frontier.abs() <= 5.0 * 1.5 / 3000.0, "frontier {frontier}");
}

#[test]
fn ball_backward_hessian_tangential_curvature() {
    let (sc, g) = (ball_2d(), ball_grid());
    let o = opts(3000);
    let rep = verify_hessian_propagation(&sc, g, PropagationDirection::Backward, &o).unwrap();
    assert_eq!(rep.verdict, Verdict::Pass, "{:?}", rep.notes);

    let arc = reference_arc(&sc, None, 3000).unwrap();
    let sol = integrate_riccati_direct(&arc, &sc.model, &Matrix::identity(2, 2), Anchor::Terminal).unwrap();
    for i in sample_indices(&arc, 0.1, 1.0, 10) {
        let (t, x) = (arc.times[i], &arc.states[i]);
        let r22 = sol.at(t).unwrap()[(1, 1)];
        assert!((r22 - 1.0 / t).abs() <= 1e-6 / t);
        // the monotone scheme's interpolation bias reaches the stencil-scale Hessian at
        // O(1 / (cells^2 dt)) independent of dx; measured worst case about 0.21
        let h22 = -g.numerical_hessian(t, x).unwrap()[(1, 1)];
        assert!((h22 - r22).abs() <= 0.25 * r22, "t = {t}: grid {h22} vs {r22}");
    }
}

#[test]
fn ball_restart_past_the_conjugate_time_is_regular() {
    let sc = ball_2d().restarted(0.5, v2(0.5, 0.0)).unwrap();
    let rep = probe_c2_regularity(&sc, ball_grid(), &opts(1000)).unwrap();
    assert_eq!(rep.verdict, Verdict::Pass, "{:?}", rep.notes);
    assert!(!rep.fitted_constants.contains_key("t_c"));
}

#[test]
fn ball_conjugate_and_comparison() {
    let sc = ball_2d();
    let conj = verify_conjugate_time(&sc, None, &opts(3000)).unwrap();
    assert_eq!(conj.verdict, Verdict::Pass);
    assert!(conj.fitted_constants["t_c"].abs() <= 5.0 * 1.5 / 3000.0);
    assert_eq!(verify_comparison(&sc, None, &opts(3000)).unwrap().verdict, Verdict::Pass);
}

#[test]
fn backward_and_forward_riccati_agree() {
    let sc = box_1d();
    let r0 = backward_riccati_at_t0(&sc, None, &opts(1000)).unwrap();
    assert!((r0[(0, 0)] + 2.0).abs() <= 1e-12);
    assert_eq!(verify_subjet_propagation(&sc, box_grid(), &r0, &opts(1000)).unwrap().verdict, Verdict::Pass);

    // a backward blow-up leaves no default premise matrix
    let ball = ball_2d();
    assert!(matches!(backward_riccati_at_t0(&ball, None, &opts(3000)), Err(Error::PremiseFailed { .. })));

    // forward from the backward value at a later start returns to the terminal data
    let late = ball.restarted(0.25, v2(0.25, 0.0)).unwrap();
    let r_start = backward_riccati_at_t0(&late, None, &opts(3000)).unwrap();
    let arc = reference_arc(&late, None, 3000).unwrap();
    let fwd = integrate_riccati_direct(&arc, &late.model, &r_start, Anchor::Initial).unwrap();
    assert_eq!(fwd.status, RiccatiStatus::Complete);
    assert!((fwd.r.last().unwrap() - Matrix::identity(2, 2)).norm() <= 1e-8);
}

#[test]
fn degenerate_terminal_costate_is_a_premise_failure() {
    let base = box_1d();
    let sc = ControlScenario::new(base.model, base.cost, 0.0, 1.0, v1(0.0), "flat")
        .unwrap()
        .with_terminal_state(Vector::zeros(1))
        .unwrap();
    for res in [
        verify_gradient_propagation(&sc, box_grid(), &opts(1000)),
        verify_conjugate_time(&sc, None, &opts(1000)),
        verify_comparison(&sc, None, &opts(1000)),
    ] {
        assert!(premise_reason(res).contains("q = 0"));
    }
}
