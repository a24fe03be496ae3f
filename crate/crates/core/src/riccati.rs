//! Variational system `(X, P)`, the matrix Riccati flow
//! `R' + H_px R + R H_xp + R H_pp R + H_xx = 0`, conjugate times and the comparison
//! bound against the linear equation without the quadratic term.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::characteristics::{fmt17, DualArc};
use crate::error::{Error, Result};
use crate::hamiltonian::{HamiltonianModel, HessianBlocks};
use crate::linalg::{self, Matrix, Vector};
use crate::ode::rk4_step;
use crate::report::{ResidualNode, VerificationReport};

/// `|R|` above which the Riccati flow is declared to have escaped.
pub const BLOWUP_THRESHOLD: f64 = 1e8;
/// `X` counts as invertible while `sigma_min(X) > 1e-10 |X|`.
pub const INVERTIBILITY_FLOOR: f64 = 1e-10;
const ASYMMETRY_TRIPWIRE: f64 = 1e-6;
const COMPARISON_TOL: f64 = 1e-8;
const PSD_TOL: f64 = 1e-9;
const BISECTION_STEPS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    /// Boundary data at `T`, integrated backward.
    Terminal,
    /// Boundary data at `t0`, integrated forward.
    Initial,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RiccatiStatus {
    Complete,
    Blowup { t_star: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiccatiSource {
    DirectIntegration,
    QuotientPxInverse,
}

/// Hessian blocks of `H` along an arc: cached at nodes and midpoints, evaluated at the
/// linearly interpolated arc point anywhere else.
struct BlockTable<'a> {
    arc: &'a DualArc,
    model: &'a HamiltonianModel,
    nodes: Vec<HessianBlocks>,
    mids: Vec<HessianBlocks>,
}

impl<'a> BlockTable<'a> {
    fn new(arc: &'a DualArc, model: &'a HamiltonianModel) -> Result<Self> {
        let nodes = arc
            .states
            .iter()
            .zip(&arc.costates)
            .map(|(x, p)| model.hessian(x, p))
            .collect::<Result<Vec<_>>>()?;
        let mids = (0..arc.len() - 1)
            .map(|i| {
                let x = linalg::lerp(&arc.states[i], &arc.states[i + 1], 0.5);
                let p = linalg::lerp(&arc.costates[i], &arc.costates[i + 1], 0.5);
                model.hessian(&x, &p)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BlockTable { arc, model, nodes, mids })
    }

    /// Table without caches; every lookup evaluates `H` at the interpolated arc point.
    fn new_lazy(arc: &'a DualArc, model: &'a HamiltonianModel) -> Self {
        BlockTable { arc, model, nodes: Vec::new(), mids: Vec::new() }
    }

    fn at(&self, t: f64) -> Result<HessianBlocks> {
        let s = (t - self.arc.t0()) / self.arc.dt();
        let twice = 2.0 * s;
        let k = twice.round();
        let cached = !self.nodes.is_empty();
        if cached && (twice - k).abs() < 1e-7 && k >= 0.0 && (k as usize) <= 2 * (self.arc.len() - 1) {
            let k = k as usize;
            return Ok(if k % 2 == 0 { self.nodes[k / 2].clone() } else { self.mids[k / 2].clone() });
        }
        let (x, p) = self.arc.at(t);
        self.model.hessian(&x, &p)
    }

    fn min_pp_eigenvalue(&self) -> f64 {
        self.nodes
            .iter()
            .chain(&self.mids)
            .map(|b| linalg::min_eigenvalue(&b.pp))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Integrates `y' = f(t, y)` from `t_from` to `t_to` in one RK4 step, using the reversed
/// variable `tau = T + t0 - t` when going backward.
fn step_between<F>(f: &F, t_from: f64, t_to: f64, y: &Vector, arc: &DualArc) -> Result<Vector>
where
    F: Fn(f64, &Vector) -> Result<Vector>,
{
    if t_to >= t_from {
        rk4_step(f, t_from, y, t_to - t_from)
    } else {
        let flip = arc.t0() + arc.t1();
        let g = |tau: f64, y: &Vector| f(flip - tau, y).map(|d| -d);
        rk4_step(&g, flip - t_from, y, t_from - t_to)
    }
}

/// Node indices in integration order, starting at the anchor.
fn order(arc: &DualArc, anchor: Anchor) -> Vec<usize> {
    match anchor {
        Anchor::Initial => (0..arc.len()).collect(),
        Anchor::Terminal => (0..arc.len()).rev().collect(),
    }
}

/// Solution `(X, P)` of the variational system along an arc.
#[derive(Debug, Clone)]
pub struct VariationalSolution {
    pub times: Vec<f64>,
    pub x: Vec<Matrix>,
    pub p: Vec<Matrix>,
    pub anchor: Anchor,
    arc: DualArc,
    model: HamiltonianModel,
}

fn variational_rhs<'a>(table: &'a BlockTable<'a>, n: usize) -> impl Fn(f64, &Vector) -> Result<Vector> + 'a {
    move |t, y| {
        let b = table.at(t)?;
        let x = linalg::unpack(&y.as_slice()[..n * n], n, n);
        let p = linalg::unpack(&y.as_slice()[n * n..], n, n);
        let dx = &b.xp * &x + &b.pp * &p;
        let dp = -(&b.xx * &x + &b.px * &p);
        let mut out = Vector::zeros(2 * n * n);
        out.rows_mut(0, n * n).copy_from(&linalg::pack(&dx));
        out.rows_mut(n * n, n * n).copy_from(&linalg::pack(&dp));
        Ok(out)
    }
}

fn pack_pair(x: &Matrix, p: &Matrix) -> Vector {
    let n2 = x.len();
    let mut y = Vector::zeros(2 * n2);
    y.rows_mut(0, n2).copy_from(&linalg::pack(x));
    y.rows_mut(n2, n2).copy_from(&linalg::pack(p));
    y
}

fn unpack_pair(y: &Vector, n: usize) -> (Matrix, Matrix) {
    (
        linalg::unpack(&y.as_slice()[..n * n], n, n),
        linalg::unpack(&y.as_slice()[n * n..], n, n),
    )
}

/// Terminal anchor: `X(T) = I`, `P(T) = -terminal_hessian`.
pub fn integrate_variational(
    arc: &DualArc,
    model: &HamiltonianModel,
    terminal_hessian: &Matrix,
) -> Result<VariationalSolution> {
    integrate_variational_anchored(arc, model, terminal_hessian, Anchor::Terminal)
}

/// Either anchor: `X = I`, `P = -hessian` at the anchor node. With `Anchor::Initial` this is
/// the forward linearized system `Y(t0) = I`, `Q(t0) = -hess V(t0, x0)`.
pub fn integrate_variational_anchored(
    arc: &DualArc,
    model: &HamiltonianModel,
    hessian: &Matrix,
    anchor: Anchor,
) -> Result<VariationalSolution> {
    let n = arc.dim();
    if hessian.nrows() != n || hessian.ncols() != n {
        return Err(Error::InvalidInput("anchor Hessian has wrong shape".into()));
    }
    let table = BlockTable::new(arc, model)?;
    let rhs = variational_rhs(&table, n);
    let idx = order(arc, anchor);
    let mut y = pack_pair(&Matrix::identity(n, n), &(-hessian));
    let mut xs = vec![Matrix::zeros(n, n); arc.len()];
    let mut ps = vec![Matrix::zeros(n, n); arc.len()];
    let (x0, p0) = unpack_pair(&y, n);
    xs[idx[0]] = x0;
    ps[idx[0]] = p0;
    for w in idx.windows(2) {
        y = step_between(&rhs, arc.times[w[0]], arc.times[w[1]], &y, arc)?;
        let (x, p) = unpack_pair(&y, n);
        if !x.iter().chain(p.iter()).all(|v| v.is_finite()) {
            return Err(Error::PrePostViolation(format!("variational solution not finite at t = {}", arc.times[w[1]])));
        }
        xs[w[1]] = x;
        ps[w[1]] = p;
    }
    Ok(VariationalSolution {
        times: arc.times.clone(),
        x: xs,
        p: ps,
        anchor,
        arc: arc.clone(),
        model: model.clone(),
    })
}

impl VariationalSolution {
    pub fn anchor_index(&self) -> usize {
        match self.anchor {
            Anchor::Initial => 0,
            Anchor::Terminal => self.times.len() - 1,
        }
    }

    /// Drift of `X^T P - P^T X` from its anchor value, maximized over nodes.
    pub fn symplectic_drift(&self) -> f64 {
        let w = |i: usize| self.x[i].transpose() * &self.p[i] - self.p[i].transpose() * &self.x[i];
        let w0 = w(self.anchor_index());
        (0..self.times.len())
            .map(|i| linalg::op_norm(&(w(i) - &w0)))
            .fold(0.0, f64::max)
    }

    /// CSV: `t, X row-major, P row-major`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let n = self.x[0].nrows();
        let mut header = vec!["t".to_string()];
        for name in ["X", "P"] {
            for i in 1..=n {
                for j in 1..=n {
                    header.push(format!("{name}_{i}{j}"));
                }
            }
        }
        writeln!(w, "{}", header.join(","))?;
        for k in 0..self.times.len() {
            let mut row = vec![fmt17(self.times[k])];
            row.extend(row_major(&self.x[k]));
            row.extend(row_major(&self.p[k]));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    fn partial_step(&self, from: usize, t_to: f64) -> Result<(Matrix, Matrix)> {
        let n = self.x[0].nrows();
        let table = BlockTable::new_lazy(&self.arc, &self.model);
        let rhs = variational_rhs(&table, n);
        let y = pack_pair(&self.x[from], &self.p[from]);
        let y = step_between(&rhs, self.times[from], t_to, &y, &self.arc)?;
        Ok(unpack_pair(&y, n))
    }
}

fn row_major(m: &Matrix) -> Vec<String> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(fmt17(m[(i, j)]));
        }
    }
    out
}

/// Time-sampled symmetric Riccati solution, stored in forward time order.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub times: Vec<f64>,
    pub r: Vec<Matrix>,
    pub status: RiccatiStatus,
    pub source: RiccatiSource,
}

impl RiccatiSolution {
    pub fn frontier(&self) -> Option<f64> {
        match self.status {
            RiccatiStatus::Blowup { t_star } => Some(t_star),
            RiccatiStatus::Complete => None,
        }
    }

    /// Stored value at the node closest to `t`, if `t` lies within the stored range.
    pub fn at(&self, t: f64) -> Option<&Matrix> {
        let first = *self.times.first()?;
        let last = *self.times.last()?;
        let slack = 1e-9 * (1.0 + t.abs());
        if t < first - slack || t > last + slack {
            return None;
        }
        let k = self
            .times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))?
            .0;
        Some(&self.r[k])
    }

    pub fn max_asymmetry(&self) -> f64 {
        self.r
            .iter()
            .filter(|r| r.iter().all(|v| v.is_finite()))
            .map(|r| linalg::asymmetry(r) / (1.0 + linalg::op_norm(r)))
            .fold(0.0, f64::max)
    }

    /// CSV: `t, R row-major`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let n = self.r.first().map(|m| m.nrows()).unwrap_or(0);
        let mut header = vec!["t".to_string()];
        for i in 1..=n {
            for j in 1..=n {
                header.push(format!("R_{i}{j}"));
            }
        }
        writeln!(w, "{}", header.join(","))?;
        for (t, r) in self.times.iter().zip(&self.r) {
            let mut row = vec![fmt17(*t)];
            row.extend(row_major(r));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn riccati_rhs<'a>(table: &'a BlockTable<'a>, n: usize) -> impl Fn(f64, &Vector) -> Result<Vector> + 'a {
    move |t, y| {
        let b = table.at(t)?;
        let r = linalg::unpack(y.as_slice(), n, n);
        let dr = -(&b.px * &r + &r * &b.xp + &r * &b.pp * &r + &b.xx);
        Ok(linalg::pack(&dr))
    }
}

fn linear_rhs<'a>(table: &'a BlockTable<'a>, n: usize) -> impl Fn(f64, &Vector) -> Result<Vector> + 'a {
    move |t, y| {
        let b = table.at(t)?;
        let q = linalg::unpack(y.as_slice(), n, n);
        let dq = -(&b.px * &q + &q * &b.xp + &b.xx);
        Ok(linalg::pack(&dq))
    }
}

fn finish(mut times: Vec<f64>, mut r: Vec<Matrix>, status: RiccatiStatus, anchor: Anchor, source: RiccatiSource) -> RiccatiSolution {
    if anchor == Anchor::Terminal {
        times.reverse();
        r.reverse();
    }
    RiccatiSolution { times, r, status, source }
}

fn integrate_symmetric(
    arc: &DualArc,
    table: &BlockTable<'_>,
    boundary: &Matrix,
    anchor: Anchor,
    quadratic: bool,
) -> Result<RiccatiSolution> {
    let n = arc.dim();
    if boundary.nrows() != n || boundary.ncols() != n {
        return Err(Error::InvalidInput("boundary matrix has wrong shape".into()));
    }
    if linalg::asymmetry(boundary) > 1e-12 * (1.0 + linalg::op_norm(boundary)) {
        return Err(Error::InvalidInput("boundary matrix must be symmetric".into()));
    }
    let idx = order(arc, anchor);
    let rhs_q = riccati_rhs(table, n);
    let rhs_l = linear_rhs(table, n);
    let mut y = linalg::pack(boundary);
    let mut times = vec![arc.times[idx[0]]];
    let mut rs = vec![boundary.clone()];
    let mut status = RiccatiStatus::Complete;
    for w in idx.windows(2) {
        let t_to = arc.times[w[1]];
        y = if quadratic {
            step_between(&rhs_q, arc.times[w[0]], t_to, &y, arc)?
        } else {
            step_between(&rhs_l, arc.times[w[0]], t_to, &y, arc)?
        };
        let mut r = linalg::unpack(y.as_slice(), n, n);
        let norm = linalg::op_norm(&r);
        if !(norm <= BLOWUP_THRESHOLD) {
            if r.iter().any(|v| v.is_nan()) {
                r = Matrix::from_element(n, n, f64::INFINITY);
            } else if norm.is_finite() {
                r = linalg::symmetrize(&r);
            }
            times.push(t_to);
            rs.push(r);
            status = RiccatiStatus::Blowup { t_star: t_to };
            break;
        }
        let asym = linalg::asymmetry(&r);
        if asym > ASYMMETRY_TRIPWIRE * (1.0 + norm) {
            return Err(Error::AsymmetryDrift { t: t_to, asymmetry: asym });
        }
        r = linalg::symmetrize(&r);
        y = linalg::pack(&r);
        times.push(t_to);
        rs.push(r);
    }
    Ok(finish(times, rs, status, anchor, RiccatiSource::DirectIntegration))
}

/// RK4 integration of the Riccati flow from `boundary_r` at the chosen anchor. Stops with
/// `Blowup` once `|R| > 1e8`.
pub fn integrate_riccati_direct(
    arc: &DualArc,
    model: &HamiltonianModel,
    boundary_r: &Matrix,
    anchor: Anchor,
) -> Result<RiccatiSolution> {
    let table = BlockTable::new(arc, model)?;
    integrate_symmetric(arc, &table, boundary_r, anchor, true)
}

/// Linear comparison equation (Riccati without the `R H_pp R` term).
pub fn integrate_linear_comparison(
    arc: &DualArc,
    model: &HamiltonianModel,
    boundary: &Matrix,
    anchor: Anchor,
) -> Result<RiccatiSolution> {
    let table = BlockTable::new(arc, model)?;
    integrate_symmetric(arc, &table, boundary, anchor, false)
}

/// `R = P X^{-1}` from the anchor outward, truncated at the first node where `X` is
/// numerically singular or `det X` changes sign.
pub fn riccati_from_variational(vs: &VariationalSolution) -> RiccatiSolution {
    let idx = order(&vs.arc, vs.anchor);
    let det0 = vs.x[idx[0]].determinant();
    let mut times = Vec::new();
    let mut rs = Vec::new();
    let mut status = RiccatiStatus::Complete;
    for &i in &idx {
        let x = &vs.x[i];
        let sigma = linalg::min_singular_value(x);
        let flipped = x.determinant() * det0.signum() <= 0.0;
        let inverse = if sigma > INVERTIBILITY_FLOOR * linalg::op_norm(x) && !flipped {
            x.clone().try_inverse()
        } else {
            None
        };
        let r = inverse.map(|inv| linalg::symmetrize(&(&vs.p[i] * inv)));
        match r {
            Some(r) if linalg::op_norm(&r) <= BLOWUP_THRESHOLD => {
                times.push(vs.times[i]);
                rs.push(r);
            }
            _ => {
                status = RiccatiStatus::Blowup { t_star: vs.times[i] };
                break;
            }
        }
    }
    finish(times, rs, status, vs.anchor, RiccatiSource::QuotientPxInverse)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjugateTimeReport {
    pub t_c: Option<f64>,
    pub det_x_trace: Vec<(f64, f64)>,
    pub min_singular_value_at_tc: f64,
    pub r_norm_growth: Vec<(f64, f64)>,
    /// `|det X(anchor)|`, the scale for the zero test.
    pub anchor_scale: f64,
}

/// Scans `det X` from the anchor outward and refines the first zero by bisection, re-integrating
/// the variational system across the bracketing step.
pub fn detect_conjugate_time(vs: &VariationalSolution) -> Result<ConjugateTimeReport> {
    let idx = order(&vs.arc, vs.anchor);
    let scale = vs.x[idx[0]].determinant().abs();
    let dets: Vec<f64> = idx.iter().map(|&i| vs.x[i].determinant()).collect();
    let mut det_trace: Vec<(f64, f64)> = idx.iter().zip(&dets).map(|(&i, &d)| (vs.times[i], d)).collect();
    let mut growth = Vec::new();
    let mut t_c = None;
    let mut sigma_tc = f64::NAN;
    for k in 0..idx.len() {
        let i = idx[k];
        let d = dets[k];
        if k > 0 && (d.signum() != dets[k - 1].signum() || d.abs() < 1e-12 * scale) {
            let from = idx[k - 1];
            if d.abs() < 1e-12 * scale && d.signum() == dets[k - 1].signum() {
                t_c = Some(vs.times[i]);
                sigma_tc = linalg::min_singular_value(&vs.x[i]);
            } else {
                // det X(from + s) changes sign for s in (0, |dt|]
                let t_from = vs.times[from];
                let mut lo = t_from;
                let mut hi = vs.times[i];
                let sign_lo = dets[k - 1].signum();
                for _ in 0..BISECTION_STEPS {
                    let mid = 0.5 * (lo + hi);
                    let (xm, _) = vs.partial_step(from, mid)?;
                    if xm.determinant().signum() == sign_lo {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let tc = 0.5 * (lo + hi);
                let (xc, _) = vs.partial_step(from, tc)?;
                sigma_tc = linalg::min_singular_value(&xc);
                det_trace.push((tc, xc.determinant()));
                t_c = Some(tc);
            }
            break;
        }
        if let Some(inv) = vs.x[i].clone().try_inverse() {
            growth.push((vs.times[i], linalg::op_norm(&(&vs.p[i] * inv))));
        }
    }
    Ok(ConjugateTimeReport {
        t_c,
        det_x_trace: det_trace,
        min_singular_value_at_tc: sigma_tc,
        r_norm_growth: growth,
        anchor_scale: scale,
    })
}

/// Checks `Q <= R` (terminal anchor) or `R <= Q` (initial anchor) where `Q` solves the linear
/// equation with the same boundary data, up to the Riccati blow-up.
pub fn comparison_bound(
    arc: &DualArc,
    model: &HamiltonianModel,
    boundary_r: &Matrix,
    anchor: Anchor,
) -> Result<VerificationReport> {
    let table = BlockTable::new(arc, model)?;
    let min_pp = table.min_pp_eigenvalue();
    if min_pp < -PSD_TOL {
        return Err(Error::PrePostViolation(format!("H_pp indefinite along the arc (min eigenvalue {min_pp:e})")));
    }
    let r = integrate_symmetric(arc, &table, boundary_r, anchor, true)?;
    let q = integrate_symmetric(arc, &table, boundary_r, anchor, false)?;
    let mut report = VerificationReport::new(
        "",
        "comparison_bound",
        format!("H_pp >= 0 along arc (min eigenvalue {min_pp:e}); anchor {anchor:?}"),
    );
    let mut margins = Vec::new();
    let mut worst = f64::INFINITY;
    let blown = r.frontier();
    for (k, &t) in r.times.iter().enumerate() {
        if blown == Some(t) {
            continue;
        }
        let Some(qt) = q.at(t) else { continue };
        let diff = match anchor {
            Anchor::Terminal => &r.r[k] - qt,
            Anchor::Initial => qt - &r.r[k],
        };
        let margin = linalg::min_eigenvalue(&diff);
        worst = worst.min(margin);
        margins.push(vec![t, margin]);
        report.push(ResidualNode::new(t, -margin, COMPARISON_TOL));
    }
    report.fit("min_margin", worst);
    if let Some(t) = blown {
        report.fit("blowup_t_star", t);
    }
    report.tables.insert("margin".into(), margins);
    Ok(report.conclude())
}

/// JSON summary of a Riccati run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiccatiSummary {
    pub status: String,
    pub t_star: Option<f64>,
    pub t_c: Option<f64>,
    pub margins: Option<f64>,
}

impl RiccatiSummary {
    pub fn new(sol: &RiccatiSolution, conj: Option<&ConjugateTimeReport>, min_margin: Option<f64>) -> Self {
        RiccatiSummary {
            status: match sol.status {
                RiccatiStatus::Complete => "complete".into(),
                RiccatiStatus::Blowup { .. } => "blowup".into(),
            },
            t_star: sol.frontier(),
            t_c: conj.and_then(|c| c.t_c),
            margins: min_margin,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::characteristics::integrate_characteristics;
    use crate::hamiltonian::{make_interval_box_model, make_unit_ball_model, ControlScenario, TerminalCost};

    fn ball_arc(t0: f64, steps: usize) -> (DualArc, HamiltonianModel) {
        let model = make_unit_ball_model(2).unwrap();
        let cost = TerminalCost::quadratic(-Matrix::identity(2, 2), Vector::zeros(2), 0.0);
        let sc = ControlScenario::new(model.clone(), cost, t0, 1.0, Vector::from_vec(vec![t0, 0.0]), "ball").unwrap();
        (integrate_characteristics(&sc, &Vector::from_vec(vec![1.0, 0.0]), steps).unwrap(), model)
    }

    #[test]
    fn ball_variational_and_quotient() {
        let (arc, model) = ball_arc(0.1, 900);
        let vs = integrate_variational(&arc, &model, &-Matrix::identity(2, 2)).unwrap();
        for (k, &t) in vs.times.iter().enumerate() {
            assert!((vs.x[k][(1, 1)] - t).abs() < 1e-10);
            assert!((vs.x[k][(0, 0)] - 1.0).abs() < 1e-12);
        }
        assert!(vs.symplectic_drift() < 1e-10);
        let q = riccati_from_variational(&vs);
        assert_eq!(q.status, RiccatiStatus::Complete);
        let d = integrate_riccati_direct(&arc, &model, &Matrix::identity(2, 2), Anchor::Terminal).unwrap();
        for (k, &t) in d.times.iter().enumerate() {
            let r22 = d.r[k][(1, 1)];
            assert!((r22 - 1.0 / t).abs() <= 1e-6 / t, "t = {t}: {r22}");
            let gap = linalg::op_norm(&(&d.r[k] - q.at(t).unwrap()));
            assert!(gap <= 1e-8 * (1.0 + linalg::op_norm(&d.r[k])));
        }
        assert!(d.max_asymmetry() <= 1e-10);
    }

    #[test]
    fn conjugate_time_at_origin() {
        let (arc, model) = ball_arc(-0.5, 1500);
        let vs = integrate_variational(&arc, &model, &-Matrix::identity(2, 2)).unwrap();
        let rep = detect_conjugate_time(&vs).unwrap();
        let tc = rep.t_c.expect("conjugate time");
        assert!(tc.abs() <= 1e-3, "t_c = {tc}");
        let direct = integrate_riccati_direct(&arc, &model, &Matrix::identity(2, 2), Anchor::Terminal).unwrap();
        let t_star = direct.frontier().expect("blow-up");
        assert!((t_star - tc).abs() <= 5.0 * arc.dt(), "t* = {t_star}");
        let quotient = riccati_from_variational(&vs);
        assert!(quotient.frontier().unwrap() <= 0.0 + arc.dt());
    }

    #[test]
    fn comparison_bound_both_anchors() {
        let (arc, model) = ball_arc(0.2, 800);
        let term = comparison_bound(&arc, &model, &Matrix::identity(2, 2), Anchor::Terminal).unwrap();
        assert!(term.passed());
        assert!(term.fitted_constants["min_margin"] >= -1e-8);
        // forward from R(t0) = diag(1, 1/t0): R stays below the linear solution
        let r0 = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 5.0]));
        let init = comparison_bound(&arc, &model, &r0, Anchor::Initial).unwrap();
        assert!(init.passed());
        let fwd = integrate_riccati_direct(&arc, &model, &r0, Anchor::Initial).unwrap();
        let r_end = fwd.r.last().unwrap();
        assert!((r_end[(1, 1)] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn box_riccati_is_constant() {
        let model = make_interval_box_model(1, 1.0).unwrap();
        let cost = TerminalCost::quadratic(Matrix::from_element(1, 1, 2.0), Vector::zeros(1), 0.0);
        let sc = ControlScenario::new(model.clone(), cost, 0.0, 1.0, Vector::from_element(1, 2.0), "box").unwrap();
        let arc = integrate_characteristics(&sc, &Vector::from_element(1, 1.0), 100).unwrap();
        let d = integrate_riccati_direct(&arc, &model, &Matrix::from_element(1, 1, -2.0), Anchor::Terminal).unwrap();
        assert!(d.r.iter().all(|r| (r[(0, 0)] + 2.0).abs() < 1e-14));
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("t,R_11\n"));
        let summary = RiccatiSummary::new(&d, None, None);
        assert_eq!(summary.status, "complete");
    }

    #[test]
    fn wrong_shape_rejected() {
        let (arc, model) = ball_arc(0.2, 50);
        assert!(integrate_variational(&arc, &model, &Matrix::identity(3, 3)).is_err());
    }
}
