//! End-to-end checks that first- and second-order information carried by a dual arc
//! (costate, Riccati solution) matches the value function computed by the grid oracle.

use serde::{Deserialize, Serialize};

use crate::characteristics::{
    integrate_characteristics, integrate_flow_from_initial, shoot_terminal_state, DualArc,
};
use crate::error::{Error, Result};
use crate::hamiltonian::{guard_radius, ControlScenario, CostRegularity};
use crate::hjb::{test_first_order, test_jet, FirstOrderKind, GridValueFunction, JetCandidate, JetKind, ProbeConfig};
use crate::linalg::{self, Matrix, Vector};
use crate::report::{ResidualNode, Verdict, VerificationReport};
use crate::riccati::{
    comparison_bound, detect_conjugate_time, integrate_riccati_direct, integrate_variational_anchored, riccati_from_variational, Anchor,
    RiccatiSolution, RiccatiStatus, VariationalSolution,
};

/// Relative tolerance for `P X^{-1}` against the directly integrated Riccati solution.
pub const QUOTIENT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropagationDirection {
    Forward,
    Backward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub steps: usize,
    pub sample_times: usize,
    pub probe: ProbeConfig,
    /// Distance kept from a Riccati blow-up frontier when sampling backward checks.
    pub frontier_margin: f64,
    /// Candidate costate sign: the sensitivity relations use `-p`; `+1` injects a wrong candidate.
    pub candidate_sign: f64,
    /// Tube radius of the regularity probe in grid cells.
    pub tube_cells: f64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            steps: crate::characteristics::DEFAULT_STEPS,
            sample_times: 5,
            probe: ProbeConfig::default(),
            frontier_margin: 0.1,
            candidate_sign: -1.0,
            tube_cells: 8.0,
        }
    }
}

/// The characteristic through `(t0, x0)`: ends at the scenario's terminal state when one is
/// declared, otherwise found by shooting from the grid's gradient at `(t0, x0)`.
pub fn reference_arc(scenario: &ControlScenario, grid: Option<&GridValueFunction>, steps: usize) -> Result<DualArc> {
    if let Some(z) = &scenario.terminal_state {
        return integrate_characteristics(scenario, z, steps);
    }
    let p0 = match grid {
        Some(g) => -g.numerical_gradient(scenario.t0, &scenario.x0)?,
        None => -scenario.cost.grad(&scenario.x0),
    };
    let guess = integrate_flow_from_initial(scenario, &scenario.x0, &p0, steps)?;
    let z = guess.terminal().0.clone();
    let q = scenario.cost.grad(&z);
    if q.norm() <= guard_radius(&q) {
        return Err(Error::DegenerateCostate { norm: q.norm() });
    }
    shoot_terminal_state(scenario, &z, steps)
}

fn arc_for(check: &str, scenario: &ControlScenario, grid: &GridValueFunction, steps: usize) -> Result<DualArc> {
    premise_arc(check, scenario, Some(grid), steps)
}

fn premise_arc(check: &str, scenario: &ControlScenario, grid: Option<&GridValueFunction>, steps: usize) -> Result<DualArc> {
    reference_arc(scenario, grid, steps).map_err(|e| match e {
        Error::DegenerateCostate { norm } => Error::premise(
            check,
            format!("costate vanishes (|grad phi(x(T))| = {norm:e}); q = 0 is excluded from the sensitivity relations"),
        ),
        Error::NonsmoothPoint { p_norm, .. } => {
            Error::premise(check, format!("arc reaches the nonsmooth set of H (|p| = {p_norm:e})"))
        }
        other => other,
    })
}

/// Node indices of `count` equispaced times on `[lo, hi]`, snapped to the arc grid without
/// leaving the interval.
pub fn sample_indices(arc: &DualArc, lo: f64, hi: f64, count: usize) -> Vec<usize> {
    let dt = arc.dt();
    let t0 = arc.t0();
    let last = arc.len() - 1;
    let first = (((lo - t0) / dt - 1e-9).ceil().max(0.0) as usize).min(last);
    let end = (((hi - t0) / dt + 1e-9).floor().max(0.0) as usize).clamp(first, last);
    let mut idx: Vec<usize> = (0..count.max(1))
        .map(|j| if count <= 1 { end } else { first + ((end - first) as f64 * j as f64 / (count - 1) as f64).round() as usize })
        .collect();
    idx.dedup();
    idx
}

/// `|grad V_num(t0, x0) + p(t0)| <= gradient budget`: the arc is the one the grid sees.
fn check_arc_optimality(check: &str, grid: &GridValueFunction, arc: &DualArc) -> Result<()> {
    let (x, p) = arc.initial();
    let t0 = arc.t0();
    let miss = (grid.numerical_gradient(t0, x)? + p).norm();
    let budget = grid.gradient_budget(t0, x)?;
    if miss > budget {
        return Err(Error::premise(
            check,
            format!("grad V(t0, x0) + p(t0) = {miss:e} exceeds the gradient budget {budget:e}; the arc is not optimal from (t0, x0)"),
        ));
    }
    Ok(())
}

fn candidate_q(arc: &DualArc, i: usize, sign: f64) -> Vector {
    &arc.costates[i] * sign
}

/// Gradient relation `grad_x V(t, x(t)) = -p(t)` at sampled times.
pub fn verify_gradient_propagation(
    scenario: &ControlScenario,
    grid: &GridValueFunction,
    opts: &VerifyOptions,
) -> Result<VerificationReport> {
    let check = "gradient_propagation";
    let arc = arc_for(check, scenario, grid, opts.steps)?;
    check_arc_optimality(check, grid, &arc)?;
    let mut report = VerificationReport::new(&scenario.label, check, "arc optimal from (t0, x0) (verified at t0)");
    let mut worst: f64 = 0.0;
    for i in sample_indices(&arc, arc.t0(), arc.t1(), opts.sample_times) {
        let (t, x) = (arc.times[i], &arc.states[i]);
        let miss = (grid.numerical_gradient(t, x)? + &arc.costates[i]).norm();
        worst = worst.max(miss);
        report.push(ResidualNode::new(t, miss, grid.gradient_budget(t, x)?));
    }
    report.fit("max_gradient_mismatch", worst);
    Ok(report.conclude())
}

/// Proximal subgradient propagation: `-p(t)` is a proximal subgradient of `V(t, .)` at
/// `x(t)` with one constant `c` for all sampled `t`.
pub fn verify_first_order_propagation(
    scenario: &ControlScenario,
    grid: &GridValueFunction,
    opts: &VerifyOptions,
) -> Result<VerificationReport> {
    let check = "first_order_propagation";
    let arc = arc_for(check, scenario, grid, opts.steps)?;
    let (x0, p0) = arc.initial();
    let pre = test_first_order(grid, arc.t0(), x0, &(-p0), FirstOrderKind::ProxSub, &opts.probe)?;
    if pre.verdict != Verdict::Pass {
        return Err(Error::premise(check, format!("-p(t0) is not a proximal subgradient of V(t0, .) at x0 ({})", describe(&pre))));
    }
    let mut report = VerificationReport::new(
        &scenario.label,
        check,
        "-p(t0) in the proximal subdifferential of V(t0, .) at x0 (verified)",
    );
    let mut c_uniform: f64 = 0.0;
    for i in sample_indices(&arc, arc.t0(), arc.t1(), opts.sample_times) {
        let q = candidate_q(&arc, i, opts.candidate_sign);
        let sub = test_first_order(grid, arc.times[i], &arc.states[i], &q, FirstOrderKind::ProxSub, &opts.probe)?;
        c_uniform = c_uniform.max(sub.fitted_constants.get("c_prox").copied().unwrap_or(0.0));
        report.absorb(&format!("t={:.6}", arc.times[i]), sub);
    }
    report.fit("c_prox_uniform", c_uniform);
    Ok(report.conclude())
}

/// First admissible sample time after a backward blow-up: the margin is measured from the
/// later of the blow-up time and the bisected conjugate time.
fn backward_start(arc: &DualArc, t_star: f64, vs: &VariationalSolution, opts: &VerifyOptions) -> Result<f64> {
    let tc = detect_conjugate_time(vs)?.t_c.unwrap_or(t_star);
    Ok((t_star.max(tc) + opts.frontier_margin).min(arc.t1()))
}

fn describe(r: &VerificationReport) -> String {
    let worst = r
        .failing_nodes()
        .map(|n| format!("residual {:e} > tolerance {:e}", n.residual, n.tolerance))
        .next()
        .unwrap_or_else(|| format!("{:?}", r.verdict).to_lowercase());
    format!("{}: {worst}", r.check)
}

fn riccati_budget(direct: &RiccatiSolution, quotient: &RiccatiSolution, t: f64) -> Option<(f64, f64)> {
    let rd = direct.at(t)?;
    let rq = quotient.at(t)?;
    let diff = linalg::op_norm(&(rd - rq));
    Some((diff, diff + 1e-10 * (1.0 + linalg::op_norm(rd))))
}

fn jet_sweep(
    report: &mut VerificationReport,
    grid: &GridValueFunction,
    arc: &DualArc,
    sol: &RiccatiSolution,
    indices: &[usize],
    kind: JetKind,
    opts: &VerifyOptions,
) -> Result<()> {
    for &i in indices {
        let t = arc.times[i];
        let Some(r) = sol.at(t) else { continue };
        let cand = JetCandidate::new(t, arc.states[i].clone(), candidate_q(arc, i, opts.candidate_sign), -r, kind)?;
        let jet = test_jet(grid, &cand, &opts.probe)?;
        report.absorb(&format!("t={t:.6}"), jet);
    }
    Ok(())
}

/// Subjet propagation forward from `(-p(t0), -r0)` along the Riccati flow.
pub fn verify_subjet_propagation(
    scenario: &ControlScenario,
    grid: &GridValueFunction,
    r0: &Matrix,
    opts: &VerifyOptions,
) -> Result<VerificationReport> {
    let check = "subjet_propagation";
    let arc = arc_for(check, scenario, grid, opts.steps)?;
    let (x0, p0) = arc.initial();
    let pre = test_jet(grid, &JetCandidate::new(arc.t0(), x0.clone(), -p0, -r0, JetKind::Subjet)?, &opts.probe)?;
    let mut report = VerificationReport::new(
        &scenario.label,
        check,
        format!("(-p(t0), -R0) in J2- V(t0, x0), R0 = {:?}", r0.as_slice()),
    );
    match pre.verdict {
        Verdict::Fail => {
            return Err(Error::premise(check, format!("(-p(t0), -R0) is not a subjet of V(t0, .) at x0 ({})", describe(&pre))))
        }
        Verdict::Inconclusive => {
            report.absorb("premise", pre);
            report.verdict = Verdict::Inconclusive;
            report.note("premise jet unresolved at this grid resolution");
            return Ok(report);
        }
        Verdict::Pass => {}
    }
    let sol = integrate_riccati_direct(&arc, &scenario.model, r0, Anchor::Initial)?;
    let a = sol.times.last().copied().unwrap_or(arc.t0());
    let hi = match sol.status {
        RiccatiStatus::Complete => arc.t1(),
        RiccatiStatus::Blowup { .. } => (a - opts.frontier_margin).max(arc.t0()),
    };
    if let RiccatiStatus::Blowup { t_star } = sol.status {
        report.fit("blowup_t_star", t_star);
        if scenario.cost.semiconcave {
            // semiconcave terminal cost: the forward solution must exist on all of [t0, T]
            report.push(ResidualNode::labeled(t_star, arc.t1() - t_star, 0.0, "riccati_complete"));
            report.note("terminal cost flagged semiconcave but the forward Riccati solution blew up");
        }
    }
    report.fit("a", hi);
    let idx = sample_indices(&arc, arc.t0(), hi, opts.sample_times);
    jet_sweep(&mut report, grid, &arc, &sol, &idx, JetKind::Subjet, opts)?;
    Ok(finish_jets(report))
}

/// Inconclusive jets keep the sweep inconclusive unless something failed outright.
fn finish_jets(report: VerificationReport) -> VerificationReport {
    let unresolved = report.notes.iter().any(|n| n.contains("InconclusiveAtResolution"));
    let mut report = report.conclude();
    if unresolved && report.verdict == Verdict::Pass {
        report.verdict = Verdict::Inconclusive;
    }
    report
}

/// Dyadic second-order remainder test of `(q, Q)` against the closed-form terminal cost.
fn terminal_superjet_premise(scenario: &ControlScenario, z: &Vector, q: &Vector, big_q: &Matrix, opts: &VerifyOptions, r0: f64) -> bool {
    let dirs = opts.probe.directions(z.len());
    let phi0 = scenario.cost.value(z);
    let stats: Vec<(f64, f64)> = (0..=opts.probe.levels)
        .map(|k| {
            let r = r0 * 0.5f64.powi(k as i32);
            let m = dirs
                .iter()
                .map(|d| {
                    let h = d * r;
                    (scenario.cost.value(&(z + &h)) - phi0 - q.dot(&h) - 0.5 * h.dot(&(big_q * &h))) / (r * r)
                })
                .fold(f64::NEG_INFINITY, f64::max);
            (r, m)
        })
        .collect();
    let n = stats.len();
    let (r_fine, m_fine) = stats[n - 1];
    let kappa = ((stats[n - 2].1 - m_fine) / r_fine).max(0.0);
    let tol = 1e-9 * (1.0 + linalg::op_norm(big_q) + phi0.abs() / (r_fine * r_fine));
    m_fine <= tol + kappa * r_fine
}

/// Superjet propagation backward from `R(T) = -Q`, reporting the blow-up frontier. `Q`
/// defaults to `hess phi(x(T))`.
pub fn verify_superjet_propagation(
    scenario: &ControlScenario,
    grid: &GridValueFunction,
    qjet: Option<&Matrix>,
    opts: &VerifyOptions,
) -> Result<VerificationReport> {
    let check = "superjet_propagation";
    let arc = arc_for(check, scenario, grid, opts.steps)?;
    let (z, p_t) = arc.terminal();
    let default_q = scenario.cost.hess(z);
    let qjet = qjet.unwrap_or(&default_q);
    let q = -p_t;
    if q.norm() <= guard_radius(&q) {
        return Err(Error::premise(check, "q = grad phi(x(T)) vanishes; q = 0 is excluded"));
    }
    let r0 = opts.probe.r0_cells * grid.spec.max_dx();
    if !terminal_superjet_premise(scenario, z, &q, qjet, opts, r0) {
        return Err(Error::premise(check, format!("(q, Q) = ({:?}, {:?}) is not a superjet of phi at x(T)", q.as_slice(), qjet.as_slice())));
    }
    let sol = integrate_riccati_direct(&arc, &scenario.model, &(-qjet), Anchor::Terminal)?;
    let mut report = VerificationReport::new(
        &scenario.label,
        check,
        format!("(q, Q) in J2+ phi(x(T)) with q != 0, Q = {:?} (verified on phi)", qjet.as_slice()),
    );
    let lo = match sol.status {
        RiccatiStatus::Complete => arc.t0(),
        RiccatiStatus::Blowup { t_star } => {
            report.fit("frontier", t_star);
            report.note(format!("Riccati blow-up frontier a = {t_star}"));
            let vs = integrate_variational_anchored(&arc, &scenario.model, qjet, Anchor::Terminal)?;
            backward_start(&arc, t_star, &vs, opts)?
        }
    };
    let idx = sample_indices(&arc, lo, arc.t1(), opts.sample_times);
    jet_sweep(&mut report, grid, &arc, &sol, &idx, JetKind::Superjet, opts)?;
    Ok(finish_jets(report))
}

/// Hessian propagation `R(t) = -hess V(t, x(t))` from either anchor, cross-checked against
/// the quotient `P X^{-1}` of the variational system.
pub fn verify_hessian_propagation(
    scenario: &ControlScenario,
    grid: &GridValueFunction,
    direction: PropagationDirection,
    opts: &VerifyOptions,
) -> Result<VerificationReport> {
    let check = match direction {
        PropagationDirection::Forward => "hessian_propagation_forward",
        PropagationDirection::Backward => "hessian_propagation_backward",
    };
    let arc = arc_for(check, scenario, grid, opts.steps)?;
    let (anchor, boundary_r, premise_text) = match direction {
        PropagationDirection::Forward => {
            check_arc_optimality(check, grid, &arc)?;
            let (t0, x0) = (arc.t0(), arc.initial().0);
            let h = grid.numerical_hessian(t0, x0)?;
            let h_half = grid.hessian_with_step(t0, x0, crate::hjb::STENCIL_CELLS / 2.0)?;
            let budget = grid.hessian_budget(t0, x0)?;
            let gap = linalg::op_norm(&(&h - &h_half));
            if gap > 2.0 * budget {
                return Err(Error::premise(
                    check,
                    format!("V(t0, .) not twice differentiable at x0 by the step-halving surrogate (gap {gap:e} > {:e})", 2.0 * budget),
                ));
            }
            (Anchor::Initial, -h, format!("step-halving surrogate for hess V(t0, x0): gap {gap:e} <= {:e}", 2.0 * budget))
        }
        PropagationDirection::Backward => {
            let (z, p_t) = arc.terminal();
            if p_t.norm() <= guard_radius(p_t) {
                return Err(Error::premise(check, "grad phi(x(T)) vanishes"));
            }
            if matches!(scenario.cost.regularity, CostRegularity::Lipschitz | CostRegularity::C11) {
                return Err(Error::premise(check, "phi is not declared twice differentiable"));
            }
            (Anchor::Terminal, -scenario.cost.hess(z), "phi twice differentiable at x(T), grad phi(x(T)) != 0".to_string())
        }
    };
    let direct = integrate_riccati_direct(&arc, &scenario.model, &boundary_r, anchor)?;
    let vs = integrate_variational_anchored(&arc, &scenario.model, &(-&boundary_r), anchor)?;
    let quotient = riccati_from_variational(&vs);

    let mut report = VerificationReport::new(&scenario.label, check, premise_text);
    let (lo, hi) = match (direction, direct.status) {
        (_, RiccatiStatus::Complete) => (arc.t0(), arc.t1()),
        (PropagationDirection::Forward, RiccatiStatus::Blowup { t_star }) => {
            report.fit("frontier", t_star);
            (arc.t0(), (t_star - opts.frontier_margin).max(arc.t0()))
        }
        (PropagationDirection::Backward, RiccatiStatus::Blowup { t_star }) => {
            report.fit("frontier", t_star);
            (backward_start(&arc, t_star, &vs, opts)?, arc.t1())
        }
    };
    let mut worst_rel: f64 = 0.0;
    let mut worst_quotient: f64 = 0.0;
    for i in sample_indices(&arc, lo, hi, opts.sample_times) {
        let (t, x) = (arc.times[i], &arc.states[i]);
        let Some(r) = direct.at(t) else { continue };
        let Some((gap, ric_budget)) = riccati_budget(&direct, &quotient, t) else { continue };
        let h = grid.numerical_hessian(t, x)?;
        let err = linalg::op_norm(&(r + &h));
        worst_rel = worst_rel.max(err / (1.0 + linalg::op_norm(r)));
        worst_quotient = worst_quotient.max(gap / (1.0 + linalg::op_norm(r)));
        report.push(ResidualNode::labeled(t, err, grid.hessian_budget(t, x)? + ric_budget, "R_vs_numerical_hessian"));
        report.push(ResidualNode::labeled(t, gap, QUOTIENT_TOL * (1.0 + linalg::op_norm(r)), "quotient_vs_direct"));
    }
    report.fit("max_relative_hessian_error", worst_rel);
    report.fit("max_quotient_gap", worst_quotient);
    Ok(report.conclude())
}

/// Absence of conjugate times on `[t0, T]` and Hessian continuity on a tube around the arc.
pub fn probe_c2_regularity(
    scenario: &ControlScenario,
    grid: &GridValueFunction,
    opts: &VerifyOptions,
) -> Result<VerificationReport> {
    let check = "c2_regularity";
    let arc = arc_for(check, scenario, grid, opts.steps)?;
    let (x0, p0) = arc.initial();
    let pre = test_first_order(grid, arc.t0(), x0, &(-p0), FirstOrderKind::ProxSub, &opts.probe)?;
    if pre.verdict != Verdict::Pass {
        return Err(Error::premise(check, format!("proximal subdifferential premise at (t0, x0) fails ({})", describe(&pre))));
    }
    let (z, _) = arc.terminal();
    let vs = integrate_variational_anchored(&arc, &scenario.model, &scenario.cost.hess(z), Anchor::Terminal)?;
    let conj = detect_conjugate_time(&vs)?;
    let mut report = VerificationReport::new(
        &scenario.label,
        check,
        "-p(t0) proximal subgradient at (t0, x0) (verified); grad phi(x(T)) != 0",
    );
    match conj.t_c {
        Some(tc) => {
            report.fit("t_c", tc);
            report.push(ResidualNode::labeled(tc, 1.0, 0.0, "conjugate_time_in_horizon"));
        }
        None => report.push(ResidualNode::labeled(arc.t0(), 0.0, 0.0, "conjugate_time_in_horizon")),
    }
    let radius = opts.tube_cells * grid.spec.max_dx();
    let mut worst_jump: f64 = 0.0;
    for i in sample_indices(&arc, arc.t0(), arc.t1(), opts.sample_times) {
        let (t, x) = (arc.times[i], &arc.states[i]);
        let h_c = grid.numerical_hessian(t, x)?;
        let b_c = grid.hessian_budget(t, x)?;
        for a in 0..x.len() {
            for s in [-1.0, 1.0] {
                let mut y = x.clone();
                y[a] += s * radius;
                let jump = linalg::op_norm(&(grid.numerical_hessian(t, &y)? - &h_c));
                worst_jump = worst_jump.max(jump);
                report.push(ResidualNode::labeled(t, jump, b_c + grid.hessian_budget(t, &y)?, "tube_hessian_jump"));
            }
        }
    }
    report.fit("max_tube_hessian_jump", worst_jump);
    Ok(report.conclude())
}

/// `R(t0)` of the Riccati solution integrated backward from `-hess phi(x(T))`: the natural
/// premise matrix for the subjet check when none is given.
pub fn backward_riccati_at_t0(
    scenario: &ControlScenario,
    grid: Option<&GridValueFunction>,
    opts: &VerifyOptions,
) -> Result<Matrix> {
    let check = "subjet_propagation";
    let arc = premise_arc(check, scenario, grid, opts.steps)?;
    let z = arc.terminal().0.clone();
    let sol = integrate_riccati_direct(&arc, &scenario.model, &(-scenario.cost.hess(&z)), Anchor::Terminal)?;
    match sol.status {
        RiccatiStatus::Complete => Ok(sol.r[0].clone()),
        RiccatiStatus::Blowup { t_star } => Err(Error::premise(
            check,
            format!("backward Riccati solution blows up at {t_star}; no default R0 at t0"),
        )),
    }
}

/// Gap kept after the conjugate time when comparing the quotient with the direct solution.
pub const CONJUGATE_MARGIN: f64 = 0.05;

/// Cross-checks the conjugate time from `det X` against the blow-up of the directly
/// integrated Riccati equation, and `P X^{-1}` against the direct solution past it.
pub fn verify_conjugate_time(
    scenario: &ControlScenario,
    grid: Option<&GridValueFunction>,
    opts: &VerifyOptions,
) -> Result<VerificationReport> {
    let check = "conjugate_time";
    let arc = premise_arc(check, scenario, grid, opts.steps)?;
    let z = arc.terminal().0.clone();
    let hess = scenario.cost.hess(&z);
    let vs = integrate_variational_anchored(&arc, &scenario.model, &hess, Anchor::Terminal)?;
    let conj = detect_conjugate_time(&vs)?;
    let direct = integrate_riccati_direct(&arc, &scenario.model, &(-&hess), Anchor::Terminal)?;
    let quotient = riccati_from_variational(&vs);
    let mut report = VerificationReport::new(&scenario.label, check, "phi twice differentiable at x(T)");
    let window = 5.0 * arc.dt();
    match (conj.t_c, direct.frontier()) {
        (Some(tc), Some(ts)) => {
            report.fit("t_c", tc);
            report.fit("blowup_t_star", ts);
            report.push(ResidualNode::labeled(tc, (ts - tc).abs(), window, "blowup_vs_conjugate"));
        }
        (None, None) => report.push(ResidualNode::labeled(arc.t0(), 0.0, window, "blowup_vs_conjugate")),
        (Some(tc), None) => {
            report.fit("t_c", tc);
            report.push(ResidualNode::labeled(tc, f64::INFINITY, window, "blowup_vs_conjugate"));
            report.note("det X vanishes but the direct Riccati solution stays bounded");
        }
        (None, Some(ts)) => {
            report.fit("blowup_t_star", ts);
            report.push(ResidualNode::labeled(ts, f64::INFINITY, window, "blowup_vs_conjugate"));
            report.note("direct Riccati solution blows up without a zero of det X");
        }
    }
    let lo = conj.t_c.into_iter().chain(direct.frontier()).fold(f64::NEG_INFINITY, f64::max) + CONJUGATE_MARGIN;
    let mut worst: f64 = 0.0;
    for (t, rd) in direct.times.iter().zip(&direct.r) {
        if *t < lo {
            continue;
        }
        let Some(rq) = quotient.at(*t) else { continue };
        let scale = 1.0 + linalg::op_norm(rd);
        let gap = linalg::op_norm(&(rd - rq));
        worst = worst.max(gap / scale);
        report.push(ResidualNode::labeled(*t, gap, QUOTIENT_TOL * scale, "quotient_vs_direct"));
    }
    report.fit("max_quotient_gap", worst);
    report.fit("anchor_det_scale", conj.anchor_scale);
    Ok(report.conclude())
}

/// Comparison bound `Q <= R` between the Riccati solution from `-hess phi(x(T))` and the
/// linear equation with the same terminal data.
pub fn verify_comparison(
    scenario: &ControlScenario,
    grid: Option<&GridValueFunction>,
    opts: &VerifyOptions,
) -> Result<VerificationReport> {
    let arc = premise_arc("comparison_bound", scenario, grid, opts.steps)?;
    let z = arc.terminal().0.clone();
    let mut report = comparison_bound(&arc, &scenario.model, &(-scenario.cost.hess(&z)), Anchor::Terminal)?;
    report.scenario = scenario.label.clone();
    Ok(report)
}

/// Runs one check by its scenario-file id, returning the report's check name alongside.
pub fn run_named_check(
    id: &str,
    sc: &ControlScenario,
    grid: Option<&GridValueFunction>,
    opts: &VerifyOptions,
    subjet_r0: Option<&Matrix>,
    superjet_q: Option<&Matrix>,
) -> (&'static str, Result<VerificationReport>) {
    let need = || grid.ok_or_else(|| Error::InvalidInput("check requires the value-function grid".into()));
    match id {
        "gradient" => ("gradient_propagation", need().and_then(|g| verify_gradient_propagation(sc, g, opts))),
        "first_order" => {
            ("first_order_propagation", need().and_then(|g| verify_first_order_propagation(sc, g, opts)))
        }
        "subjet" => ("subjet_propagation", need().and_then(|g| {
            let r0 = match subjet_r0 {
                Some(m) => m.clone(),
                None => backward_riccati_at_t0(sc, Some(g), opts)?,
            };
            verify_subjet_propagation(sc, g, &r0, opts)
        })),
        "superjet" => {
            ("superjet_propagation", need().and_then(|g| verify_superjet_propagation(sc, g, superjet_q, opts)))
        }
        "hessian_forward" => ("hessian_propagation_forward", need().and_then(|g| {
            verify_hessian_propagation(sc, g, PropagationDirection::Forward, opts)
        })),
        "hessian_backward" => ("hessian_propagation_backward", need().and_then(|g| {
            verify_hessian_propagation(sc, g, PropagationDirection::Backward, opts)
        })),
        "c2" => ("c2_regularity", need().and_then(|g| probe_c2_regularity(sc, g, opts))),
        "conjugate" => ("conjugate_time", verify_conjugate_time(sc, grid, opts)),
        "comparison" => ("comparison_bound", verify_comparison(sc, grid, opts)),
        other => ("unknown", Err(Error::InvalidInput(format!("unknown check `{other}`")))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::{make_interval_box_model, TerminalCost};

    #[test]
    fn sample_indices_hit_endpoints() {
        let model = make_interval_box_model(1, 1.0).unwrap();
        let cost = TerminalCost::quadratic(Matrix::from_element(1, 1, 2.0), Vector::zeros(1), 0.0);
        let sc = ControlScenario::new(model, cost, 0.0, 1.0, Vector::from_element(1, 2.0), "box").unwrap();
        let arc = reference_arc(&sc, None, 400).unwrap();
        let idx = sample_indices(&arc, 0.0, 1.0, 5);
        assert_eq!(idx, vec![0, 100, 200, 300, 400]);
        assert!((arc.terminal().0[0] - 1.0).abs() < 1e-12);
    }
}
