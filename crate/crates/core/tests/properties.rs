//! Randomized invariants of the Hamiltonian models, the linearized flows and the grid tests.

mod common;

use std::sync::Arc;

use common::*;
use mayer_sens::characteristics::{integrate_characteristics, maximum_principle_residual};
use mayer_sens::field::{Term, TermField, TermFn};
use mayer_sens::hamiltonian::{
    make_affine_control_model, make_interval_box_model, make_unit_ball_model, ControlScenario, HamiltonianModel,
    TerminalCost,
};
use mayer_sens::hjb::{solve_value_function, test_first_order, test_jet, FirstOrderKind, JetCandidate, JetKind, ProbeConfig};
use mayer_sens::riccati::{integrate_riccati_direct, integrate_variational, Anchor};
use mayer_sens::{Matrix, Vector};
use proptest::prelude::*;

fn pendulum() -> HamiltonianModel {
    let h = TermField::new(2, vec![vec![Term::monomial(1.0, vec![0, 1])], vec![Term::trig(-1.0, TermFn::Sin, 0)]]).unwrap();
    make_affine_control_model(Arc::new(h), Arc::new(TermField::identity(2)), 2, 2).unwrap()
}

fn models() -> Vec<HamiltonianModel> {
    vec![make_interval_box_model(2, 0.7).unwrap(), make_unit_ball_model(2).unwrap(), pendulum()]
}

fn pendulum_scenario(a: &Matrix) -> ControlScenario {
    let cost = TerminalCost::quadratic(a.clone(), Vector::zeros(2), 0.0);
    ControlScenario::new(pendulum(), cost, 0.0, 0.5, v2(1.5, 0.5), "pendulum").unwrap()
}

fn sym2(a: f64, b: f64, c: f64) -> Matrix {
    Matrix::from_row_slice(2, 2, &[a, b, b, c])
}

fn coord() -> impl Strategy<Value = f64> {
    -2.0..2.0f64
}

fn costate_coord() -> impl Strategy<Value = f64> {
    prop_oneof![-3.0..-0.1f64, 0.1..3.0f64]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn hamiltonian_is_homogeneous_and_euler(x1 in coord(), x2 in coord(), p1 in costate_coord(), p2 in costate_coord(), lambda in 0.1..10.0f64) {
        let x = v2(x1, x2);
        let p = v2(p1, p2);
        for m in models() {
            let h = m.eval(&x, &p);
            prop_assert!((m.eval(&x, &(&p * lambda)) - lambda * h).abs() <= 1e-9 * (1.0 + lambda * h.abs()));
            let euler = m.grad_p(&x, &p).unwrap().dot(&p);
            prop_assert!((euler - h).abs() <= 1e-9 * (1.0 + h.abs()));
            let blocks = m.hessian(&x, &p).unwrap();
            prop_assert!((&blocks.pp * &p).norm() <= 1e-8 * (1.0 + p.norm()));
            prop_assert!(blocks.pp.symmetric_eigenvalues().min() >= -1e-10);
        }
    }

    #[test]
    fn riccati_stays_symmetric_and_flow_symplectic(z1 in -1.0..2.0f64, z2 in -1.0..1.0f64, a in 0.5..2.0f64, b in -0.4..0.4f64, c in 0.5..2.0f64) {
        let hess = sym2(a, b, c);
        let sc = pendulum_scenario(&hess);
        let arc = integrate_characteristics(&sc, &v2(z1, z2), 200).unwrap();
        let r = integrate_riccati_direct(&arc, &sc.model, &(-&hess), Anchor::Terminal).unwrap();
        prop_assert!(r.max_asymmetry() <= 1e-10);
        let vs = integrate_variational(&arc, &sc.model, &hess).unwrap();
        prop_assert!(vs.symplectic_drift() <= 1e-8, "drift {}", vs.symplectic_drift());
        let dt = arc.dt();
        prop_assert!(maximum_principle_residual(&arc, &sc.model) <= 1e-8 + 10.0 * dt * dt);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn scheme_is_monotone_in_terminal_data(a in 0.0..2.0f64, b in -1.0..1.0f64, e in 0.0..1.0f64, d in 0.0..0.5f64) {
        let base = box_1d();
        let low = TerminalCost::quadratic(m1(a), v1(b), 0.0);
        let high = TerminalCost::quadratic(m1(a + e), v1(b), d);
        let spec = box_spec(101, 100);
        let solve = |cost: TerminalCost| {
            let sc = ControlScenario::new(base.model.clone(), cost, 0.0, 1.0, v1(0.0), "m").unwrap();
            solve_value_function(&sc, &spec, 2).unwrap()
        };
        let (g1, g2) = (solve(low), solve(high));
        for (s1, s2) in g1.values.iter().zip(&g2.values) {
            for (v1, v2) in s1.iter().zip(s2) {
                prop_assert!(v1 <= &(v2 + 1e-12));
            }
        }
    }

    #[test]
    fn jet_statistic_is_monotone_in_q(t in 0.0..0.5f64, x in 1.6..2.3f64, q in 1.0..4.0f64, big_q in -1.0..4.0f64, delta in 0.0..1.0f64) {
        let g = box_grid();
        let probe = ProbeConfig::default();
        let run = |qq: f64, kind| test_jet(g, &JetCandidate::new(t, v1(x), v1(q), m1(qq), kind).unwrap(), &probe).unwrap();
        let (sub, sub_lower) = (run(big_q, JetKind::Subjet), run(big_q - delta, JetKind::Subjet));
        let (sup, sup_upper) = (run(big_q, JetKind::Superjet), run(big_q + delta, JetKind::Superjet));
        for (lo, hi) in sub.tables["m_k"].iter().zip(&sub_lower.tables["m_k"]) {
            prop_assert!(hi[1] >= lo[1] - 1e-12);
        }
        for (lo, hi) in sup.tables["m_k"].iter().zip(&sup_upper.tables["m_k"]) {
            prop_assert!(hi[1] <= lo[1] + 1e-12);
        }
        if sub.passed() {
            prop_assert!(sub_lower.passed());
        }
        if sup.passed() {
            prop_assert!(sup_upper.passed());
        }
    }

    #[test]
    fn grid_gradient_passes_both_first_order_tests(t in 0.0..0.5f64, x in 1.6..2.3f64) {
        let g = box_grid();
        let probe = ProbeConfig::default();
        let y = v1(x);
        let q = g.numerical_gradient(t, &y).unwrap();
        prop_assert!((q[0] - 2.0 * (x + t - 1.0)).abs() <= g.gradient_budget(t, &y).unwrap().max(1e-2));
        for kind in [FirstOrderKind::Sub, FirstOrderKind::Super] {
            prop_assert!(test_first_order(g, t, &y, &q, kind, &probe).unwrap().passed());
        }
    }

    #[test]
    fn subjet_and_superjet_are_dual_under_negation(t in 0.0..0.8f64, x in -2.0..2.3f64, q in -4.0..4.0f64, big_q in -3.0..3.0f64) {
        let g = box_grid();
        let neg = g.negated();
        let probe = ProbeConfig { levels: 3, ..ProbeConfig::default() };
        let sub = test_jet(g, &JetCandidate::new(t, v1(x), v1(q), m1(big_q), JetKind::Subjet).unwrap(), &probe).unwrap();
        let sup = test_jet(&neg, &JetCandidate::new(t, v1(x), v1(-q), m1(-big_q), JetKind::Superjet).unwrap(), &probe).unwrap();
        prop_assert_eq!(sub.verdict, sup.verdict);
        for (a, b) in sub.tables["m_k"].iter().zip(&sup.tables["m_k"]) {
            prop_assert!((a[1] + b[1]).abs() <= 1e-12 * (1.0 + a[1].abs()));
        }
    }
}
