//! Grid value function by semi-Lagrangian dynamic programming, with interpolation,
//! difference-quotient derivatives and one-sided first/second-order remainder tests.
//!
//! Nodes whose update depends on clamped (off-grid) data are flagged as contaminated and
//! the flag travels backward along the minimizing foot points. Queries never read
//! contaminated nodes silently.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::characteristics::fmt17;
use crate::error::{Error, Result};
use crate::hamiltonian::{sample_directions, ControlScenario};
use crate::linalg::{self, Matrix, Vector};
use crate::report::{ResidualNode, Verdict, VerificationReport};

/// Constant in the a-priori budget `C (T - t0) (dx^2 / dt + dt)`; from the convergence
/// study on the 1-D closed-form problem (observed ratio 0.14) with a 3.5x margin.
pub const BUDGET_CONSTANT: f64 = 0.5;
/// Largest admissible ratio `eta_K / eta_{K-1}` of slope violations for a one-sided gradient.
pub const SLOPE_DECAY: f64 = 0.75;
/// Largest admissible ratio `c_K / c_{K-1}` of proximal constants.
pub const PROX_GROWTH: f64 = 1.5;
/// Derivative stencil step in grid cells.
pub const STENCIL_CELLS: f64 = 4.0;

/// Anything that can report `V(t, x)` with a known error budget.
pub trait ValueSource: Sync {
    fn label(&self) -> String;
    fn value(&self, t: f64, x: &Vector) -> Result<f64>;
    /// Uniform bound on `|V_reported - V_true|`.
    fn budget(&self) -> f64;
}

/// Exact value function given in closed form.
pub struct ClosedFormValue<F: Fn(f64, &Vector) -> f64 + Sync> {
    pub label: String,
    pub f: F,
}

impl<F: Fn(f64, &Vector) -> f64 + Sync> ValueSource for ClosedFormValue<F> {
    fn label(&self) -> String {
        self.label.clone()
    }
    fn value(&self, t: f64, x: &Vector) -> Result<f64> {
        Ok((self.f)(t, x))
    }
    fn budget(&self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dim: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub points_per_axis: usize,
    pub time_steps: usize,
    pub t0: f64,
    pub t1: f64,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if !(1..=2).contains(&self.dim) {
            return bad(format!("grid dimension must be 1 or 2, got {}", self.dim));
        }
        if self.lower.len() != self.dim || self.upper.len() != self.dim {
            return bad("grid corners must have length dim".into());
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(u > l)) {
            return bad("grid upper corner must exceed lower corner".into());
        }
        if self.points_per_axis < 41 || self.points_per_axis % 2 == 0 {
            return bad(format!("points_per_axis must be odd and >= 41, got {}", self.points_per_axis));
        }
        if self.time_steps < 100 {
            return bad(format!("time_steps must be >= 100, got {}", self.time_steps));
        }
        if !(self.t1 > self.t0) {
            return bad("grid horizon requires t1 > t0".into());
        }
        Ok(())
    }

    pub fn dx(&self, axis: usize) -> f64 {
        (self.upper[axis] - self.lower[axis]) / (self.points_per_axis - 1) as f64
    }

    pub fn max_dx(&self) -> f64 {
        (0..self.dim).map(|a| self.dx(a)).fold(0.0, f64::max)
    }

    pub fn dt(&self) -> f64 {
        (self.t1 - self.t0) / self.time_steps as f64
    }

    pub fn node_count(&self) -> usize {
        self.points_per_axis.pow(self.dim as u32)
    }

    pub fn slice_time(&self, k: usize) -> f64 {
        if k == self.time_steps {
            self.t1
        } else {
            self.t0 + k as f64 * self.dt()
        }
    }

    fn axis_coord(&self, axis: usize, i: usize) -> f64 {
        if i == self.points_per_axis - 1 {
            self.upper[axis]
        } else {
            self.lower[axis] + i as f64 * self.dx(axis)
        }
    }

    pub fn node(&self, flat: usize) -> Vector {
        let n = self.points_per_axis;
        match self.dim {
            1 => Vector::from_element(1, self.axis_coord(0, flat)),
            _ => Vector::from_vec(vec![self.axis_coord(0, flat % n), self.axis_coord(1, flat / n)]),
        }
    }

    /// Whether the domain contains the Gronwall tube
    /// `|x - x0| <= (e^{gamma (T - t0)} - 1)(1 + |x0|) + margin`.
    pub fn covers_growth_tube(&self, x0: &Vector, gamma: f64, margin: f64) -> bool {
        let reach = ((gamma * (self.t1 - self.t0)).exp() - 1.0) * (1.0 + x0.norm()) + margin;
        (0..self.dim).all(|a| x0[a] - reach >= self.lower[a] && x0[a] + reach <= self.upper[a])
    }

    /// Square domain centred at `x0` that covers the growth tube.
    pub fn padded_for(scenario: &ControlScenario, points_per_axis: usize, time_steps: usize, margin: f64) -> Self {
        let x0 = &scenario.x0;
        let gamma = scenario.model.growth_gamma;
        let reach = ((gamma * (scenario.t1 - scenario.t0)).exp() - 1.0) * (1.0 + x0.norm()) + margin;
        GridSpec {
            dim: scenario.dim(),
            lower: x0.iter().map(|c| c - reach).collect(),
            upper: x0.iter().map(|c| c + reach).collect(),
            points_per_axis,
            time_steps,
            t0: scenario.t0,
            t1: scenario.t1,
        }
    }
}

/// Grid approximation of the value function on `[t0, t1] x domain`.
#[derive(Debug, Clone)]
pub struct GridValueFunction {
    pub spec: GridSpec,
    /// `values[k][node]` at time `spec.slice_time(k)`; nodes are x-fastest.
    pub values: Vec<Vec<f64>>,
    pub contaminated: Vec<Vec<bool>>,
    pub error_budget: f64,
    pub velocity_count: usize,
    pub label: String,
    /// Same problem at half resolution in space and time.
    pub companion: Option<Box<GridValueFunction>>,
}

struct Sample {
    value: f64,
    tainted: bool,
}

/// Multilinear stencil (up to 4 nodes) of a point, clamped to the domain.
fn stencil(spec: &GridSpec, x: &[f64]) -> (arrayvec_like::Stencil, bool) {
    let n = spec.points_per_axis;
    let mut off = false;
    let mut idx = [0usize; 2];
    let mut frac = [0.0f64; 2];
    for a in 0..spec.dim {
        let dx = spec.dx(a);
        let lo = spec.lower[a];
        let hi = spec.upper[a];
        let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
        if x[a] < lo - slack || x[a] > hi + slack {
            off = true;
        }
        let s = ((x[a].clamp(lo, hi) - lo) / dx).clamp(0.0, (n - 1) as f64);
        let mut i = s.floor() as usize;
        if i >= n - 1 {
            i = n - 2;
        }
        let mut f = s - i as f64;
        if f < 1e-12 {
            f = 0.0;
        } else if f > 1.0 - 1e-12 {
            f = 1.0;
        }
        idx[a] = i;
        frac[a] = f;
    }
    let mut st = arrayvec_like::Stencil::default();
    match spec.dim {
        1 => {
            st.push(idx[0], 1.0 - frac[0]);
            st.push(idx[0] + 1, frac[0]);
        }
        _ => {
            for (di, wi) in [(0, 1.0 - frac[0]), (1, frac[0])] {
                for (dj, wj) in [(0, 1.0 - frac[1]), (1, frac[1])] {
                    st.push(idx[0] + di + (idx[1] + dj) * n, wi * wj);
                }
            }
        }
    }
    (st, off)
}

mod arrayvec_like {
    /// Fixed-capacity list of (node, weight) pairs.
    #[derive(Default, Clone, Copy)]
    pub struct Stencil {
        pub nodes: [(usize, f64); 4],
        pub len: usize,
    }

    impl Stencil {
        pub fn push(&mut self, node: usize, w: f64) {
            self.nodes[self.len] = (node, w);
            self.len += 1;
        }

        pub fn iter(&self) -> impl Iterator<Item = &(usize, f64)> {
            self.nodes[..self.len].iter()
        }
    }
}

fn sample_slice(spec: &GridSpec, values: &[f64], mask: &[bool], x: &[f64]) -> Sample {
    let (st, off_grid) = stencil(spec, x);
    let mut value = 0.0;
    let mut tainted = off_grid;
    for &(node, w) in st.iter() {
        if w > 0.0 {
            value += w * values[node];
            tainted |= mask[node];
        }
    }
    Sample { value, tainted }
}

/// Share of a node's value that may derive from clamped data before it is flagged.
pub const CONTAMINATION_THRESHOLD: f64 = 1e-6;

/// Backward semi-Lagrangian recursion
/// `V(t_k, x_i) = min_j V(t_{k+1}, x_i + dt v_j(x_i))` with `V(T, .) = phi`.
///
/// A half-resolution companion solve is kept for a-posteriori error estimates.
pub fn solve_value_function(
    scenario: &ControlScenario,
    spec: &GridSpec,
    velocity_samples: usize,
) -> Result<GridValueFunction> {
    spec.validate()?;
    if spec.dim != scenario.dim() {
        return Err(Error::InvalidInput("grid dimension differs from model dimension".into()));
    }
    let coarse_spec = GridSpec {
        points_per_axis: (spec.points_per_axis + 1) / 2,
        time_steps: (spec.time_steps + 1) / 2,
        ..spec.clone()
    };
    let coarse = solve_raw(scenario, &coarse_spec, velocity_samples)?;
    let mut grid = solve_raw(scenario, spec, velocity_samples)?;
    grid.companion = Some(Box::new(coarse));

    if scenario.t0 >= spec.t0 && scenario.t0 <= spec.t1 {
        let check = grid.interpolate(scenario.t0, &scenario.x0).and_then(|_| grid.defect(scenario.t0, &scenario.x0));
        match check {
            Err(Error::ContaminatedRegion(m)) => {
                return Err(Error::ContaminatedRegion(format!("region of interest around x0: {m}; enlarge the domain")))
            }
            Err(Error::OutOfDomain(m)) => return Err(Error::OutOfDomain(format!("x0 outside the grid: {m}"))),
            _ => {}
        }
    }
    Ok(grid)
}

/// Precomputed axis geometry for the hot loop.
struct Axes {
    dim: usize,
    n: usize,
    lower: [f64; 2],
    upper: [f64; 2],
    inv_dx: [f64; 2],
    slack: [f64; 2],
}

impl Axes {
    fn new(spec: &GridSpec) -> Self {
        let mut ax = Axes { dim: spec.dim, n: spec.points_per_axis, lower: [0.0; 2], upper: [0.0; 2], inv_dx: [0.0; 2], slack: [0.0; 2] };
        for a in 0..spec.dim {
            ax.lower[a] = spec.lower[a];
            ax.upper[a] = spec.upper[a];
            ax.inv_dx[a] = 1.0 / spec.dx(a);
            ax.slack[a] = 1e-12 * (1.0 + spec.lower[a].abs().max(spec.upper[a].abs()));
        }
        ax
    }

    /// Cell index and fraction along one axis; flags clamping.
    #[inline]
    fn locate(&self, a: usize, x: f64, off: &mut bool) -> (usize, f64) {
        if x < self.lower[a] - self.slack[a] || x > self.upper[a] + self.slack[a] {
            *off = true;
        }
        let s = ((x - self.lower[a]) * self.inv_dx[a]).clamp(0.0, (self.n - 1) as f64);
        let i = (s.floor() as usize).min(self.n - 2);
        (i, s - i as f64)
    }

    /// Interpolates `(values, influence)` at `x`.
    #[inline]
    fn sample(&self, x: &[f64], v: &[f64], c: &[f64], off: &mut bool) -> (f64, f64) {
        let (i, fx) = self.locate(0, x[0], off);
        if self.dim == 1 {
            let (w0, w1) = (1.0 - fx, fx);
            return (w0 * v[i] + w1 * v[i + 1], w0 * c[i] + w1 * c[i + 1]);
        }
        let (j, fy) = self.locate(1, x[1], off);
        let base = i + j * self.n;
        let (a00, a10, a01, a11) = ((1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy);
        let (b0, b1) = (base, base + self.n);
        (
            a00 * v[b0] + a10 * v[b0 + 1] + a01 * v[b1] + a11 * v[b1 + 1],
            a00 * c[b0] + a10 * c[b0 + 1] + a01 * c[b1] + a11 * c[b1 + 1],
        )
    }
}

fn solve_raw(scenario: &ControlScenario, spec: &GridSpec, velocity_samples: usize) -> Result<GridValueFunction> {
    let nodes = spec.node_count();
    let dim = spec.dim;
    let dt = spec.dt();
    let coords: Vec<Vector> = (0..nodes).map(|i| spec.node(i)).collect();
    // foot points, flattened as [node][candidate][axis]
    let mut feet: Vec<f64> = Vec::new();
    let mut velocity_count = 0;
    for x in &coords {
        let vs = scenario.model.velocity_samples(x, velocity_samples).ok_or_else(|| {
            Error::ModelInvalid(format!(
                "{:?} model cannot enumerate extreme velocities for the grid oracle",
                scenario.model.family
            ))
        })?;
        velocity_count = vs.len();
        for v in vs {
            feet.extend((x + v * dt).iter());
        }
    }
    let stride = velocity_count * dim;
    let axes = Axes::new(spec);

    let steps = spec.time_steps;
    let mut values = vec![Vec::new(); steps + 1];
    let mut contaminated = vec![Vec::new(); steps + 1];
    values[steps] = coords.iter().map(|x| scenario.cost.value(x)).collect();
    contaminated[steps] = vec![false; nodes];
    // influence of clamped data on each node of the current slice
    let mut influence = vec![0.0f64; nodes];

    for k in (0..steps).rev() {
        let next_v = &values[k + 1];
        let next_c = &influence;
        let updated: Vec<(f64, f64)> = feet
            .par_chunks(stride)
            .map(|cands| {
                let mut best = f64::INFINITY;
                let mut best_c = 1.0;
                let mut any_off = false;
                for foot in cands.chunks_exact(dim) {
                    let (v, c) = axes.sample(foot, next_v, next_c, &mut any_off);
                    let tie = 1e-14 * (1.0 + best.abs());
                    if v < best - tie || (v <= best + tie && c < best_c) {
                        best = v;
                        best_c = c;
                    }
                }
                (best, if any_off { 1.0 } else { best_c })
            })
            .collect();
        values[k] = updated.iter().map(|u| u.0).collect();
        influence = updated.iter().map(|u| u.1).collect();
        contaminated[k] = influence.iter().map(|&c| c > CONTAMINATION_THRESHOLD).collect();
    }

    let horizon = spec.t1 - spec.t0;
    let sum_dx2: f64 = (0..spec.dim).map(|a| spec.dx(a).powi(2)).sum();
    Ok(GridValueFunction {
        spec: spec.clone(),
        values,
        contaminated,
        error_budget: BUDGET_CONSTANT * horizon * (sum_dx2 / dt + dt),
        velocity_count,
        label: scenario.label.clone(),
        companion: None,
    })
}

/// Kind of one-sided first-order test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstOrderKind {
    Sub,
    Super,
    ProxSub,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JetKind {
    Subjet,
    Superjet,
}

/// Candidate second-order jet `(q, Q)` of `V(t, .)` at `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct JetCandidate {
    pub t: f64,
    pub x: Vector,
    pub q: Vector,
    pub big_q: Matrix,
    pub kind: JetKind,
}

impl JetCandidate {
    pub fn new(t: f64, x: Vector, q: Vector, big_q: Matrix, kind: JetKind) -> Result<Self> {
        if linalg::asymmetry(&big_q) > 1e-10 * (1.0 + linalg::op_norm(&big_q)) {
            return Err(Error::InvalidInput("jet matrix must be symmetric".into()));
        }
        Ok(JetCandidate { t, x, q, big_q: linalg::symmetrize(&big_q), kind })
    }
}

/// Dyadic probe radii `r_k = r0 2^{-k}`, `k = 0..=levels`, and sampled directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub r0_cells: f64,
    pub levels: usize,
    pub random_directions: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { r0_cells: 32.0, levels: 4, random_directions: 16, seed: 7 }
    }
}

impl ProbeConfig {
    pub fn radii(&self, grid: &GridValueFunction) -> Vec<f64> {
        let r0 = self.r0_cells * grid.spec.max_dx();
        (0..=self.levels).map(|k| r0 * 0.5f64.powi(k as i32)).collect()
    }

    pub fn directions(&self, dim: usize) -> Vec<Vector> {
        let mut dirs = Vec::new();
        if dim == 1 {
            dirs.push(Vector::from_element(1, 1.0));
            dirs.push(Vector::from_element(1, -1.0));
            return dirs;
        }
        let s = std::f64::consts::FRAC_1_SQRT_2;
        for (a, b) in [(1.0, 0.0), (0.0, 1.0), (s, s), (s, -s)] {
            dirs.push(Vector::from_vec(vec![a, b]));
            dirs.push(Vector::from_vec(vec![-a, -b]));
        }
        dirs.extend(sample_directions(self.seed, self.random_directions, dim));
        dirs
    }
}

impl GridValueFunction {
    fn slice_position(&self, t: f64) -> Result<(usize, f64)> {
        let spec = &self.spec;
        let slack = 1e-9 * (1.0 + spec.t1.abs().max(spec.t0.abs()));
        if t < spec.t0 - slack || t > spec.t1 + slack {
            return Err(Error::OutOfDomain(format!("t = {t} outside [{}, {}]", spec.t0, spec.t1)));
        }
        let s = ((t - spec.t0) / spec.dt()).clamp(0.0, spec.time_steps as f64);
        let k = s.round();
        if (s - k).abs() < 1e-9 {
            return Ok((k as usize, 0.0));
        }
        let k = s.floor() as usize;
        Ok((k, s - k as f64))
    }

    fn check_inside(&self, x: &Vector) -> Result<()> {
        if x.len() != self.spec.dim {
            return Err(Error::InvalidInput("query point has wrong dimension".into()));
        }
        for a in 0..self.spec.dim {
            let slack = 1e-12 * (1.0 + self.spec.upper[a].abs().max(self.spec.lower[a].abs()));
            if x[a] < self.spec.lower[a] - slack || x[a] > self.spec.upper[a] + slack {
                return Err(Error::OutOfDomain(format!("x = {:?} outside the grid", x.as_slice())));
            }
        }
        Ok(())
    }

    /// Linear in time between slices, multilinear in space.
    pub fn interpolate(&self, t: f64, x: &Vector) -> Result<f64> {
        self.check_inside(x)?;
        let (k, theta) = self.slice_position(t)?;
        let mut total = 0.0;
        for (slice, w) in [(k, 1.0 - theta), (k + 1, theta)] {
            if w == 0.0 {
                continue;
            }
            let s = sample_slice(&self.spec, &self.values[slice], &self.contaminated[slice], x.as_slice());
            if s.tainted {
                return Err(Error::ContaminatedRegion(format!(
                    "stencil of (t = {t}, x = {:?}) touches contaminated nodes",
                    x.as_slice()
                )));
            }
            total += w * s.value;
        }
        Ok(total)
    }

    fn steps(&self, cells: f64) -> Vec<f64> {
        (0..self.spec.dim).map(|a| cells * self.spec.dx(a)).collect()
    }

    pub fn numerical_gradient(&self, t: f64, x: &Vector) -> Result<Vector> {
        self.gradient_with_step(t, x, STENCIL_CELLS)
    }

    pub fn gradient_with_step(&self, t: f64, x: &Vector, cells: f64) -> Result<Vector> {
        let rho = self.steps(cells);
        let mut g = Vector::zeros(self.spec.dim);
        for a in 0..self.spec.dim {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[a] += rho[a];
            xm[a] -= rho[a];
            g[a] = (self.interpolate(t, &xp)? - self.interpolate(t, &xm)?) / (2.0 * rho[a]);
        }
        Ok(g)
    }

    pub fn numerical_hessian(&self, t: f64, x: &Vector) -> Result<Matrix> {
        self.hessian_with_step(t, x, STENCIL_CELLS)
    }

    pub fn hessian_with_step(&self, t: f64, x: &Vector, cells: f64) -> Result<Matrix> {
        let d = self.spec.dim;
        let rho = self.steps(cells);
        let f0 = self.interpolate(t, x)?;
        let shifted = |a: usize, sa: f64, b: Option<(usize, f64)>| -> Result<f64> {
            let mut y = x.clone();
            y[a] += sa * rho[a];
            if let Some((b, sb)) = b {
                y[b] += sb * rho[b];
            }
            self.interpolate(t, &y)
        };
        let mut h = Matrix::zeros(d, d);
        for a in 0..d {
            h[(a, a)] = (shifted(a, 1.0, None)? - 2.0 * f0 + shifted(a, -1.0, None)?) / (rho[a] * rho[a]);
            for b in (a + 1)..d {
                let v = (shifted(a, 1.0, Some((b, 1.0)))? - shifted(a, 1.0, Some((b, -1.0)))?
                    - shifted(a, -1.0, Some((b, 1.0)))?
                    + shifted(a, -1.0, Some((b, -1.0)))?)
                    / (4.0 * rho[a] * rho[b]);
                h[(a, b)] = v;
                h[(b, a)] = v;
            }
        }
        Ok(h)
    }

    /// Bound on the interpolation error of a single query near `x`:
    /// `sum_a dx_a^2 / 8 * max |second difference along a|` over the enclosing cell.
    pub fn interpolation_error(&self, t: f64, x: &Vector) -> Result<f64> {
        let (k, theta) = self.slice_position(t)?;
        let spec = &self.spec;
        let n = spec.points_per_axis;
        let (st, _) = stencil(spec, x.as_slice());
        let mut worst: f64 = 0.0;
        for slice in [k, (k + 1).min(spec.time_steps)] {
            if slice != k && theta == 0.0 {
                continue;
            }
            let v = &self.values[slice];
            for &(node, _) in st.iter() {
                let idx = [node % n, node / n];
                for a in 0..spec.dim {
                    let i = idx[a];
                    if i == 0 || i == n - 1 {
                        continue;
                    }
                    let stride = if a == 0 { 1 } else { n };
                    let sd = (v[node + stride] - 2.0 * v[node] + v[node - stride]).abs();
                    worst = worst.max(sd / 8.0);
                }
            }
        }
        Ok(worst * spec.dim as f64)
    }

    /// Defect `V_coarse - V_fine` of the half-resolution companion; for a first-order
    /// scheme it estimates the error of the fine grid.
    pub fn defect(&self, t: f64, x: &Vector) -> Result<f64> {
        match &self.companion {
            Some(c) => Ok(c.interpolate(t, x)? - self.interpolate(t, x)?),
            None => Ok(0.0),
        }
    }

    /// Accuracy of `numerical_gradient` near `x`.
    pub fn gradient_budget(&self, t: f64, x: &Vector) -> Result<f64> {
        let rho = STENCIL_CELLS * self.spec.max_dx();
        let fine = self.numerical_gradient(t, x)?;
        let wide = self.gradient_with_step(t, x, 2.0 * STENCIL_CELLS)?;
        let bias = match &self.companion {
            Some(c) => (c.gradient_with_step(t, x, STENCIL_CELLS / 2.0)? - &fine).norm(),
            None => 0.0,
        };
        // smooth scheme bias, interpolation noise over the stencil, stencil truncation
        Ok(2.0 * bias + 2.0 * self.interpolation_error(t, x)? / rho + (wide - fine).norm() / 3.0 + 1e-12)
    }

    /// Accuracy of `numerical_hessian` near `x`.
    pub fn hessian_budget(&self, t: f64, x: &Vector) -> Result<f64> {
        let rho = STENCIL_CELLS * self.spec.max_dx();
        let fine = self.numerical_hessian(t, x)?;
        let wide = self.hessian_with_step(t, x, 2.0 * STENCIL_CELLS)?;
        let bias = match &self.companion {
            Some(c) => linalg::op_norm(&(c.hessian_with_step(t, x, STENCIL_CELLS / 2.0)? - &fine)),
            None => 0.0,
        };
        Ok(2.0 * bias + 8.0 * self.interpolation_error(t, x)? / (rho * rho) + linalg::op_norm(&(wide - fine)) / 3.0 + 1e-10)
    }

    /// Grid of `-V` with the same contamination mask.
    pub fn negated(&self) -> GridValueFunction {
        let mut g = self.clone();
        for slice in &mut g.values {
            for v in slice.iter_mut() {
                *v = -*v;
            }
        }
        g.label = format!("-({})", self.label);
        g.companion = self.companion.as_ref().map(|c| Box::new(c.negated()));
        g
    }

    pub fn contaminated_fraction(&self, k: usize) -> f64 {
        let m = &self.contaminated[k];
        m.iter().filter(|&&b| b).count() as f64 / m.len() as f64
    }

    /// Writes up to `max_slices` evenly spaced time slices as CSV plus `manifest.json`;
    /// returns the written paths.
    pub fn export(&self, dir: &Path, max_slices: usize) -> std::io::Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let steps = self.spec.time_steps;
        let count = max_slices.clamp(2, steps + 1);
        let mut picks: Vec<usize> = (0..count).map(|j| j * steps / (count - 1)).collect();
        picks.dedup();
        let mut paths = Vec::new();
        let mut slices = Vec::new();
        for &k in &picks {
            let name = format!("slice_{k:05}.csv");
            let path = dir.join(&name);
            let mut w = std::io::BufWriter::new(fs::File::create(&path)?);
            let header = if self.spec.dim == 1 { "x_1,V,contaminated" } else { "x_1,x_2,V,contaminated" };
            writeln!(w, "{header}")?;
            for (i, v) in self.values[k].iter().enumerate() {
                let x = self.spec.node(i);
                let coords: Vec<String> = x.iter().map(|c| fmt17(*c)).collect();
                writeln!(w, "{},{},{}", coords.join(","), fmt17(*v), u8::from(self.contaminated[k][i]))?;
            }
            w.flush()?;
            slices.push(serde_json::json!({
                "file": name,
                "t": self.spec.slice_time(k),
                "contaminated_fraction": self.contaminated_fraction(k),
            }));
            paths.push(path);
        }
        let manifest = serde_json::json!({
            "label": self.label,
            "spec": self.spec,
            "error_budget": self.error_budget,
            "velocity_count": self.velocity_count,
            "contamination": {
                "initial_slice_fraction": self.contaminated_fraction(0),
                "final_slice_fraction": self.contaminated_fraction(steps),
            },
            "slices": slices,
        });
        let mpath = dir.join("manifest.json");
        fs::write(&mpath, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
        paths.push(mpath);
        Ok(paths)
    }
}

impl ValueSource for GridValueFunction {
    fn label(&self) -> String {
        self.label.clone()
    }
    fn value(&self, t: f64, x: &Vector) -> Result<f64> {
        self.interpolate(t, x)
    }
    fn budget(&self) -> f64 {
        self.error_budget
    }
}

/// Statistic per probe radius: `(r_k, stat_k, noise_k)`.
struct RadiusRow {
    r: f64,
    stat: f64,
    noise: f64,
}

fn remainders<F>(grid: &GridValueFunction, t: f64, x: &Vector, probe: &ProbeConfig, mut per_h: F) -> Result<Vec<Vec<(f64, f64)>>>
where
    F: FnMut(&Vector, f64) -> f64,
{
    let v0 = grid.interpolate(t, x)?;
    let e0 = grid.interpolation_error(t, x)?;
    let d0 = grid.defect(t, x)?;
    let dirs = probe.directions(grid.spec.dim);
    probe
        .radii(grid)
        .iter()
        .map(|&r| {
            dirs.iter()
                .map(|d| {
                    let h = d * r;
                    let y = x + &h;
                    let dv = grid.interpolate(t, &y)? - v0;
                    // interpolation noise plus the variation of the estimated scheme error
                    let noise = e0 + grid.interpolation_error(t, &y)? + 2.0 * (grid.defect(t, &y)? - d0).abs();
                    Ok((per_h(&h, dv), noise))
                })
                .collect()
        })
        .collect()
}

/// One-sided first-order test of `q` at `(t, x)` using `rho1(h) = V(t, x+h) - V(t, x) - <q, h>`.
pub fn test_first_order(
    grid: &GridValueFunction,
    t: f64,
    x: &Vector,
    q: &Vector,
    kind: FirstOrderKind,
    probe: &ProbeConfig,
) -> Result<VerificationReport> {
    let sign = if kind == FirstOrderKind::Super { -1.0 } else { 1.0 };
    let rows = remainders(grid, t, x, probe, |h, dv| sign * (dv - q.dot(h)))?;
    let radii = probe.radii(grid);
    let floor = grid.gradient_budget(t, x)?;
    let check = match kind {
        FirstOrderKind::Sub => "first_order_sub",
        FirstOrderKind::Super => "first_order_super",
        FirstOrderKind::ProxSub => "first_order_prox_sub",
    };
    let mut report = VerificationReport::new(grid.label.clone(), check, format!("q = {:?}", q.as_slice()));

    // slope violation per radius: eta_k = max(0, max_h -(rho1 + noise) / |h|)
    let eta: Vec<RadiusRow> = rows
        .iter()
        .zip(&radii)
        .map(|(row, &r)| {
            let noise = row.iter().map(|e| e.1).fold(0.0, f64::max);
            let stat = row.iter().map(|(rho, n)| -(rho + n) / r).fold(0.0, f64::max);
            RadiusRow { r, stat, noise }
        })
        .collect();
    let kk = eta.len() - 1;
    let r_fine = eta[kk].r;
    match kind {
        FirstOrderKind::Sub | FirstOrderKind::Super => {
            // a valid one-sided gradient has eta_k -> 0 at least linearly in r_k
            let tol = floor.max(SLOPE_DECAY * eta[kk - 1].stat);
            report.fit("eta", eta[kk].stat);
            report.push(ResidualNode::labeled(t, eta[kk].stat, tol, "slope_violation"));
        }
        FirstOrderKind::ProxSub => {
            // c_k = eta_k / r_k stays bounded for a proximal subgradient and doubles per
            // halving of r for a slope violation
            let c_fine = eta[kk].stat / r_fine;
            let c_prev = eta[kk - 1].stat / eta[kk - 1].r;
            let tol = (floor / r_fine).max(PROX_GROWTH * c_prev);
            // smallest c with rho1 >= -c |h|^2 - floor |h| - noise on every sampled radius
            let c = rows
                .iter()
                .zip(&radii)
                .flat_map(|(row, &r)| row.iter().map(move |(rho, n)| -(rho + n + floor * r) / (r * r)))
                .fold(0.0, f64::max);
            report.fit("c_prox", c);
            report.push(ResidualNode::labeled(t, c_fine, tol, "proximal_constant_growth"));
        }
    }
    report.fit("gradient_budget", floor);
    report.tables.insert(
        "radii".into(),
        eta.iter().map(|row| vec![row.r, row.stat, row.noise]).collect(),
    );
    Ok(report.conclude())
}

/// Second-order remainder test of a jet candidate over dyadic radii.
pub fn test_jet(grid: &GridValueFunction, cand: &JetCandidate, probe: &ProbeConfig) -> Result<VerificationReport> {
    let rows = remainders(grid, cand.t, &cand.x, probe, |h, dv| {
        dv - cand.q.dot(h) - 0.5 * h.dot(&(&cand.big_q * h))
    })?;
    let radii = probe.radii(grid);
    let sub = cand.kind == JetKind::Subjet;
    // m_k = min (sub) or max (super) of rho2 / |h|^2
    let table: Vec<RadiusRow> = rows
        .iter()
        .zip(&radii)
        .map(|(row, &r)| {
            let ratios = row.iter().map(|(rho, _)| rho / (r * r));
            let stat = if sub { ratios.fold(f64::INFINITY, f64::min) } else { ratios.fold(f64::NEG_INFINITY, f64::max) };
            let noise = row.iter().map(|e| e.1).fold(0.0, f64::max) / (r * r);
            RadiusRow { r, stat, noise }
        })
        .collect();
    let kk = table.len() - 1;
    let signed = |m: f64| if sub { -m } else { m };
    // slope allowance from the two finest radii
    let kappa = ((signed(table[kk - 1].stat) - signed(table[kk].stat)) / table[kk].r).max(0.0);

    let check = if sub { "jet_subjet" } else { "jet_superjet" };
    let mut report = VerificationReport::new(
        grid.label.clone(),
        check,
        format!("q = {:?}, Q = {:?}", cand.q.as_slice(), cand.big_q.as_slice()),
    );
    for row in &table[kk - 1..] {
        report.push(ResidualNode::labeled(cand.t, signed(row.stat), row.noise + kappa * row.r, format!("r={:.6e}", row.r)));
    }
    report.fit("kappa", kappa);
    report.fit("m_finest", table[kk].stat);
    report.tables.insert("m_k".into(), table.iter().map(|row| vec![row.r, row.stat, row.noise]).collect());
    let mut report = report.conclude();

    let scale = 0.1 * (1.0 + linalg::op_norm(&cand.big_q));
    let unresolved = table.iter().all(|row| row.noise > 10.0 * row.stat.abs() && row.noise > scale);
    if unresolved {
        report.verdict = Verdict::Inconclusive;
        report.note("InconclusiveAtResolution: grid error dominates the remainder at every probe radius");
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::{make_interval_box_model, TerminalCost};

    fn box_scenario() -> ControlScenario {
        let model = make_interval_box_model(1, 1.0).unwrap();
        let cost = TerminalCost::quadratic(Matrix::from_element(1, 1, 2.0), Vector::zeros(1), 0.0);
        ControlScenario::new(model, cost, 0.0, 1.0, Vector::from_element(1, 2.0), "box").unwrap()
    }

    fn box_spec(points: usize, steps: usize) -> GridSpec {
        GridSpec { dim: 1, lower: vec![-3.0], upper: vec![3.0], points_per_axis: points, time_steps: steps, t0: 0.0, t1: 1.0 }
    }

    fn exact(t: f64, x: f64) -> f64 {
        if x >= 1.0 - t {
            (x + t - 1.0).powi(2)
        } else if x <= t - 1.0 {
            (x - t + 1.0).powi(2)
        } else {
            0.0
        }
    }

    /// Exact quadratic sampled at the nodes of a single-slice grid.
    fn sampled_quadratic(points: usize) -> GridValueFunction {
        let spec = GridSpec { time_steps: 100, ..box_spec(points, 100) };
        let slice: Vec<f64> = (0..points).map(|i| spec.node(i)[0].powi(2)).collect();
        GridValueFunction {
            values: vec![slice; spec.time_steps + 1],
            contaminated: vec![vec![false; points]; spec.time_steps + 1],
            spec,
            error_budget: 0.0,
            velocity_count: 2,
            label: "sampled".into(),
            companion: None,
        }
    }

    #[test]
    fn spec_validation_rejects_bad_grids() {
        assert!(box_spec(401, 400).validate().is_ok());
        assert!(box_spec(400, 400).validate().is_err());
        assert!(box_spec(21, 400).validate().is_err());
        assert!(box_spec(401, 50).validate().is_err());
        let mut s = box_spec(401, 400);
        s.upper = vec![-4.0];
        assert!(s.validate().is_err());
    }

    #[test]
    fn terminal_slice_is_the_cost() {
        let g = solve_value_function(&box_scenario(), &box_spec(101, 100), 2).unwrap();
        for x in [-1.3, 0.0, 0.77, 2.4] {
            let v = g.interpolate(1.0, &Vector::from_element(1, x)).unwrap();
            // linear interpolation of z^2 overestimates by at most dx^2 / 4
            assert!(v >= x * x - 1e-12 && v - x * x <= 0.25 * g.spec.dx(0).powi(2) + 1e-12);
        }
    }

    #[test]
    fn small_grid_tracks_closed_form() {
        let g = solve_value_function(&box_scenario(), &box_spec(201, 200), 2).unwrap();
        for i in 0..=20 {
            let x = -1.5 + 0.15 * i as f64;
            let v = g.interpolate(0.5, &Vector::from_element(1, x)).unwrap();
            assert!((v - exact(0.5, x)).abs() <= g.error_budget, "x = {x}");
        }
    }

    #[test]
    fn queries_outside_or_near_clamped_edge_error() {
        let g = solve_value_function(&box_scenario(), &box_spec(101, 100), 2).unwrap();
        assert!(matches!(g.interpolate(0.5, &Vector::from_element(1, 3.5)), Err(Error::OutOfDomain(_))));
        assert!(matches!(g.interpolate(1.5, &Vector::from_element(1, 0.0)), Err(Error::OutOfDomain(_))));
        assert!(matches!(g.interpolate(0.0, &Vector::from_element(1, -3.0)), Err(Error::ContaminatedRegion(_))));
        assert!(g.contaminated[0].iter().any(|&c| c));
        assert!(!g.contaminated[g.spec.time_steps].iter().any(|&c| c));
    }

    #[test]
    fn region_of_interest_outside_clean_set_is_refused() {
        let spec = GridSpec { lower: vec![1.95], upper: vec![2.05], ..box_spec(41, 100) };
        let err = solve_value_function(&box_scenario(), &spec, 2).unwrap_err();
        assert_eq!(err.name(), "ContaminatedRegion");
    }

    #[test]
    fn derivatives_of_sampled_quadratic() {
        let g = sampled_quadratic(601);
        let x = Vector::from_element(1, 0.4);
        assert!((g.numerical_gradient(0.5, &x).unwrap()[0] - 0.8).abs() < 1e-10);
        assert!((g.numerical_hessian(0.5, &x).unwrap()[(0, 0)] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn first_order_tests_separate_slopes() {
        let g = sampled_quadratic(601);
        let x = Vector::from_element(1, 0.4);
        let probe = ProbeConfig::default();
        let good = Vector::from_element(1, 0.8);
        let bad = Vector::from_element(1, 1.3);
        for kind in [FirstOrderKind::Sub, FirstOrderKind::ProxSub] {
            assert_eq!(test_first_order(&g, 0.5, &x, &good, kind, &probe).unwrap().verdict, Verdict::Pass);
            assert_eq!(test_first_order(&g, 0.5, &x, &bad, kind, &probe).unwrap().verdict, Verdict::Fail);
        }
        // a convex function has no supergradient beyond first order, but the slope is still exact
        assert_eq!(test_first_order(&g, 0.5, &x, &good, FirstOrderKind::Super, &probe).unwrap().verdict, Verdict::Pass);
    }

    #[test]
    fn jets_of_sampled_quadratic() {
        let g = sampled_quadratic(601);
        let x = Vector::from_element(1, 0.4);
        let probe = ProbeConfig::default();
        let q = Vector::from_element(1, 0.8);
        let cand = |qq: f64, kind| JetCandidate::new(0.5, x.clone(), q.clone(), Matrix::from_element(1, 1, qq), kind).unwrap();
        assert_eq!(test_jet(&g, &cand(2.0, JetKind::Subjet), &probe).unwrap().verdict, Verdict::Pass);
        assert_eq!(test_jet(&g, &cand(1.0, JetKind::Subjet), &probe).unwrap().verdict, Verdict::Pass);
        assert_eq!(test_jet(&g, &cand(3.0, JetKind::Subjet), &probe).unwrap().verdict, Verdict::Fail);
        assert_eq!(test_jet(&g, &cand(3.0, JetKind::Superjet), &probe).unwrap().verdict, Verdict::Pass);
        assert_eq!(test_jet(&g, &cand(1.0, JetKind::Superjet), &probe).unwrap().verdict, Verdict::Fail);
    }

    #[test]
    fn unresolved_radii_are_inconclusive() {
        // the half-resolution companion disagrees by an oscillation that swamps every radius
        let mut g = sampled_quadratic(601);
        let mut coarse = g.clone();
        for slice in &mut coarse.values {
            for (i, v) in slice.iter_mut().enumerate() {
                *v += 1e-2 * (20.0 * g.spec.node(i)[0]).cos();
            }
        }
        g.companion = Some(Box::new(coarse));
        let probe = ProbeConfig { r0_cells: 8.0, levels: 2, ..ProbeConfig::default() };
        let cand = JetCandidate::new(
            0.5,
            Vector::from_element(1, 0.4),
            Vector::from_element(1, 0.8),
            Matrix::from_element(1, 1, 2.0),
            JetKind::Subjet,
        )
        .unwrap();
        let r = test_jet(&g, &cand, &probe).unwrap();
        assert_eq!(r.verdict, Verdict::Inconclusive);
        assert!(r.notes.iter().any(|n| n.contains("InconclusiveAtResolution")));
    }

    #[test]
    fn asymmetric_jet_matrix_rejected() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(JetCandidate::new(0.0, Vector::zeros(2), Vector::zeros(2), m, JetKind::Subjet).is_err());
    }

    #[test]
    fn export_writes_slices_and_manifest() {
        let g = solve_value_function(&box_scenario(), &box_spec(101, 100), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = g.export(dir.path(), 5).unwrap();
        assert_eq!(paths.len(), 6);
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["slices"].as_array().unwrap().len(), 5);
        assert!(manifest["error_budget"].as_f64().unwrap() > 0.0);
        let first = std::fs::read_to_string(&paths[0]).unwrap();
        assert!(first.starts_with("x_1,V,contaminated\n"));
        assert_eq!(first.lines().count(), 102);
    }

    #[test]
    fn growth_tube_coverage() {
        let spec = box_spec(401, 400);
        assert!(spec.covers_growth_tube(&Vector::from_element(1, 0.0), 1.0, 0.0));
        assert!(!spec.covers_growth_tube(&Vector::from_element(1, 2.0), 1.0, 0.0));
        let padded = GridSpec::padded_for(&box_scenario(), 401, 400, 0.5);
        assert!(padded.covers_growth_tube(&Vector::from_element(1, 2.0), 1.0, 0.5 - 1e-12));
    }
}
