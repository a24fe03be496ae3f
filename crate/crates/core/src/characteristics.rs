//! Characteristic (state, costate) arcs of `x' = grad_p H`, `-p' = grad_x H`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hamiltonian::{guard_radius, ControlScenario, HamiltonianModel};
use crate::hjb::ValueSource;
use crate::linalg::{self, Matrix, Vector};
use crate::ode::{rk4_step, uniform_times};
use crate::report::{ResidualNode, VerificationReport};

pub const DEFAULT_STEPS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArcDirection {
    ForwardFromT0,
    BackwardFromT,
}

/// Time-sampled solution of the characteristic system, stored in forward time order
/// on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DualArc {
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
    pub costates: Vec<Vector>,
    pub direction: ArcDirection,
}

impl DualArc {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn dt(&self) -> f64 {
        self.times[1] - self.times[0]
    }

    pub fn t0(&self) -> f64 {
        self.times[0]
    }

    pub fn t1(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn initial(&self) -> (&Vector, &Vector) {
        (&self.states[0], &self.costates[0])
    }

    pub fn terminal(&self) -> (&Vector, &Vector) {
        (self.states.last().unwrap(), self.costates.last().unwrap())
    }

    /// Linear interpolation of `(x, p)` at `t`, clamped to the arc's time range.
    pub fn at(&self, t: f64) -> (Vector, Vector) {
        let n = self.len();
        let s = ((t - self.t0()) / self.dt()).clamp(0.0, (n - 1) as f64);
        let i = (s.floor() as usize).min(n - 2);
        let theta = s - i as f64;
        (
            linalg::lerp(&self.states[i], &self.states[i + 1], theta),
            linalg::lerp(&self.costates[i], &self.costates[i + 1], theta),
        )
    }

    /// Either every costate is nonzero or every costate vanishes.
    pub fn costate_dichotomy(&self) -> bool {
        let nonzero = self.costates.iter().filter(|p| p.norm() > 0.0).count();
        nonzero == 0 || nonzero == self.len()
    }

    /// Local constant `c_r` with `|grad_x H(x, p)| <= c_r |p|` along the arc.
    pub fn gronwall_constant(&self, model: &HamiltonianModel) -> Result<f64> {
        let mut c: f64 = 0.0;
        for (x, p) in self.states.iter().zip(&self.costates) {
            let gx = model.grad_x(x, p)?;
            c = c.max(gx.norm() / p.norm());
        }
        Ok(c)
    }

    /// `max |p| <= exp(c_r (T - t0)) min |p|`.
    pub fn gronwall_holds(&self, model: &HamiltonianModel) -> Result<bool> {
        let c = self.gronwall_constant(model)?;
        let norms: Vec<f64> = self.costates.iter().map(|p| p.norm()).collect();
        let max = norms.iter().cloned().fold(0.0, f64::max);
        let min = norms.iter().cloned().fold(f64::INFINITY, f64::min);
        Ok(max <= (c * (self.t1() - self.t0())).exp() * min * (1.0 + 1e-12))
    }

    /// CSV with header `t,x_1..x_n,p_1..p_n`, 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let n = self.dim();
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x_{i}")));
        header.extend((1..=n).map(|i| format!("p_{i}")));
        writeln!(w, "{}", header.join(","))?;
        for k in 0..self.len() {
            let mut row = vec![fmt17(self.times[k])];
            row.extend(self.states[k].iter().map(|v| fmt17(*v)));
            row.extend(self.costates[k].iter().map(|v| fmt17(*v)));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// 17 significant digits in scientific notation.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Admissible trajectory sampled in time (no costate).
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vector>,
}

impl From<&DualArc> for Trajectory {
    fn from(arc: &DualArc) -> Self {
        Trajectory { times: arc.times.clone(), states: arc.states.clone() }
    }
}

fn check_costate(p: &Vector) -> Result<()> {
    let guard = guard_radius(p);
    if p.norm() < guard {
        return Err(Error::DegenerateCostate { norm: p.norm() });
    }
    Ok(())
}

/// Right-hand side of the characteristic system on the packed state `[x; p]`.
fn hamiltonian_rhs(model: &HamiltonianModel, y: &Vector) -> Result<Vector> {
    let n = model.dim();
    let x = y.rows(0, n).into_owned();
    let p = y.rows(n, n).into_owned();
    let guard = guard_radius(&p);
    if p.norm() < guard {
        return Err(Error::NonsmoothPoint { p_norm: p.norm(), guard });
    }
    let dx = model.grad_p(&x, &p)?;
    let dp = -model.grad_x(&x, &p)?;
    let mut out = Vector::zeros(2 * n);
    out.rows_mut(0, n).copy_from(&dx);
    out.rows_mut(n, n).copy_from(&dp);
    Ok(out)
}

fn pack_state(x: &Vector, p: &Vector) -> Vector {
    let n = x.len();
    let mut y = Vector::zeros(2 * n);
    y.rows_mut(0, n).copy_from(x);
    y.rows_mut(n, n).copy_from(p);
    y
}

fn split_state(y: &Vector, n: usize) -> (Vector, Vector) {
    (y.rows(0, n).into_owned(), y.rows(n, n).into_owned())
}

/// Integrates the characteristic system backward from `x(T) = terminal_state`,
/// `p(T) = -grad phi(terminal_state)`, in the reversed time `tau = T + t0 - t`.
pub fn integrate_characteristics(
    scenario: &ControlScenario,
    terminal_state: &Vector,
    steps: usize,
) -> Result<DualArc> {
    if steps < 2 {
        return Err(Error::InvalidInput("steps must be >= 2".into()));
    }
    if terminal_state.len() != scenario.dim() {
        return Err(Error::InvalidInput("terminal state has wrong length".into()));
    }
    let n = scenario.dim();
    let p_terminal = -scenario.cost.grad(terminal_state);
    check_costate(&p_terminal)?;

    let times = uniform_times(scenario.t0, scenario.t1, steps);
    let h = times[1] - times[0];
    // d/dtau y = -f(y)
    let rhs = |_tau: f64, y: &Vector| hamiltonian_rhs(&scenario.model, y).map(|d| -d);
    let mut y = pack_state(terminal_state, &p_terminal);
    let mut states = vec![terminal_state.clone()];
    let mut costates = vec![p_terminal];
    for k in 0..steps {
        y = rk4_step(&rhs, scenario.t0 + k as f64 * h, &y, h)?;
        let (x, p) = split_state(&y, n);
        states.push(x);
        costates.push(p);
    }
    states.reverse();
    costates.reverse();
    Ok(DualArc { times, states, costates, direction: ArcDirection::BackwardFromT })
}

/// Forward integration from `(y0, p0)` at `t0`.
pub fn integrate_flow_from_initial(
    scenario: &ControlScenario,
    y0: &Vector,
    p0: &Vector,
    steps: usize,
) -> Result<DualArc> {
    if steps < 2 {
        return Err(Error::InvalidInput("steps must be >= 2".into()));
    }
    if y0.len() != scenario.dim() || p0.len() != scenario.dim() {
        return Err(Error::InvalidInput("initial state/costate has wrong length".into()));
    }
    check_costate(p0)?;
    let n = scenario.dim();
    let times = uniform_times(scenario.t0, scenario.t1, steps);
    let h = times[1] - times[0];
    let rhs = |_t: f64, y: &Vector| hamiltonian_rhs(&scenario.model, y);
    let mut y = pack_state(y0, p0);
    let mut states = vec![y0.clone()];
    let mut costates = vec![p0.clone()];
    for k in 0..steps {
        y = rk4_step(&rhs, times[k], &y, h)?;
        let (x, p) = split_state(&y, n);
        states.push(x);
        costates.push(p);
    }
    Ok(DualArc { times, states, costates, direction: ArcDirection::ForwardFromT0 })
}

/// `max_i |H(x_i, p_i) - <p_i, x'_i>|` over interior nodes, with `x'` from central
/// differences of the stored states.
pub fn maximum_principle_residual(arc: &DualArc, model: &HamiltonianModel) -> f64 {
    let dt = arc.dt();
    (1..arc.len() - 1)
        .map(|i| {
            let xdot = (&arc.states[i + 1] - &arc.states[i - 1]) / (2.0 * dt);
            let (x, p) = (&arc.states[i], &arc.costates[i]);
            (model.eval(x, p) - p.dot(&xdot)).abs()
        })
        .fold(0.0, f64::max)
}

/// Newton shooting on the terminal state so that the backward characteristic starts at `x0`.
/// The Jacobian `d x(t0) / d z` is taken by central differences.
pub fn shoot_terminal_state(
    scenario: &ControlScenario,
    z_guess: &Vector,
    steps: usize,
) -> Result<DualArc> {
    let n = scenario.dim();
    let tol = 1e-11 * (1.0 + scenario.x0.norm());
    let mut z = z_guess.clone();
    let mut arc = integrate_characteristics(scenario, &z, steps)?;
    for _ in 0..50 {
        let miss = &arc.states[0] - &scenario.x0;
        if miss.norm() <= tol {
            return Ok(arc);
        }
        let h = 1e-6 * (1.0 + z.norm());
        let mut jac = Matrix::zeros(n, n);
        for j in 0..n {
            let (mut za, mut zb) = (z.clone(), z.clone());
            za[j] += h;
            zb[j] -= h;
            let xa = integrate_characteristics(scenario, &za, steps)?.states[0].clone();
            let xb = integrate_characteristics(scenario, &zb, steps)?.states[0].clone();
            jac.set_column(j, &((xa - xb) / (2.0 * h)));
        }
        let delta = jac
            .lu()
            .solve(&miss)
            .ok_or_else(|| Error::PrePostViolation("singular shooting Jacobian (conjugate point at t0?)".into()))?;
        z -= delta;
        arc = integrate_characteristics(scenario, &z, steps)?;
    }
    let miss = (&arc.states[0] - &scenario.x0).norm();
    if miss <= 1e3 * tol {
        Ok(arc)
    } else {
        Err(Error::PrePostViolation(format!("shooting did not converge, |x(t0) - x0| = {miss:e}")))
    }
}

/// Samples `s -> V(s, y(s))` along an admissible trajectory; flags a violation only when
/// a decrease exceeds the value source's error budget.
pub fn dynamic_programming_monotonicity(
    value: &dyn ValueSource,
    trajectory: &Trajectory,
) -> Result<VerificationReport> {
    if trajectory.times.len() < 2 {
        return Err(Error::InvalidInput("trajectory needs at least two nodes".into()));
    }
    let mut report = VerificationReport::new(
        value.label(),
        "dynamic_programming_monotonicity",
        "trajectory is admissible",
    );
    let vals: Vec<f64> = trajectory
        .times
        .iter()
        .zip(&trajectory.states)
        .map(|(&t, x)| value.value(t, x))
        .collect::<Result<_>>()?;
    let tol = 2.0 * value.budget() + 1e-12 * (1.0 + vals[0].abs());
    let mut max_decrease: f64 = 0.0;
    let mut strictly_increasing = true;
    for i in 1..vals.len() {
        let decrease = vals[i - 1] - vals[i];
        max_decrease = max_decrease.max(decrease);
        strictly_increasing &= vals[i] > vals[i - 1];
        report.push(ResidualNode::new(trajectory.times[i], decrease, tol));
    }
    report.fit("max_decrease", max_decrease);
    report.fit("net_increase", vals[vals.len() - 1] - vals[0]);
    report.fit("strictly_increasing", if strictly_increasing { 1.0 } else { 0.0 });
    Ok(report.conclude())
}
