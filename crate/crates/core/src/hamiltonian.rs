//! Hamiltonians `H(x, p) = sup_{v in F(x)} <v, p>` of differential inclusions, terminal
//! costs, and the structural checks a model must pass before it is integrated.
//!
//! Second-derivative blocks follow one convention throughout the crate:
//! `xp[(i, j)] = d^2 H / dp_i dx_j` is the Jacobian of `grad_p` with respect to `x`,
//! `px = xp^T`, and `xx`, `pp` are the usual symmetric blocks. With this convention
//! the linearized characteristic system reads `dX/dt = xp X + pp P`.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{fd_step, Field, TermField};
use crate::linalg::{self, Matrix, Vector};
use crate::report::{ResidualNode, VerificationReport};

/// Guard radius around `p = 0`: `1e-9 * (1 + |p|)`.
pub fn guard_radius(p: &Vector) -> f64 {
    1e-9 * (1.0 + p.norm())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Smoothness {
    C2,
    C21,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyTag {
    IntervalBox,
    AffineControl,
    Custom,
}

/// The four second-derivative blocks of `H` at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianBlocks {
    pub xx: Matrix,
    pub xp: Matrix,
    pub px: Matrix,
    pub pp: Matrix,
}

impl HessianBlocks {
    pub fn zeros(n: usize) -> Self {
        HessianBlocks {
            xx: Matrix::zeros(n, n),
            xp: Matrix::zeros(n, n),
            px: Matrix::zeros(n, n),
            pp: Matrix::zeros(n, n),
        }
    }

    pub fn lerp(&self, other: &HessianBlocks, theta: f64) -> HessianBlocks {
        let mix = |a: &Matrix, b: &Matrix| a * (1.0 - theta) + b * theta;
        HessianBlocks {
            xx: mix(&self.xx, &other.xx),
            xp: mix(&self.xp, &other.xp),
            px: mix(&self.px, &other.px),
            pp: mix(&self.pp, &other.pp),
        }
    }
}

/// Evaluator bundle behind a [`HamiltonianModel`].
pub trait Hamiltonian: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &Vector, p: &Vector) -> f64;
    fn grad_p(&self, x: &Vector, p: &Vector) -> Result<Vector>;
    fn grad_x(&self, x: &Vector, p: &Vector) -> Result<Vector>;
    fn hessian(&self, x: &Vector, p: &Vector) -> Result<HessianBlocks>;

    /// Velocities spanning the extreme points of `F(x)`, if the family can enumerate them.
    fn velocity_samples(&self, _x: &Vector, _count: usize) -> Option<Vec<Vector>> {
        None
    }
}

/// Immutable, thread-safe Hamiltonian with its structural metadata.
#[derive(Clone)]
pub struct HamiltonianModel {
    inner: Arc<dyn Hamiltonian>,
    pub growth_gamma: f64,
    pub smoothness: Smoothness,
    pub family: FamilyTag,
}

impl std::fmt::Debug for HamiltonianModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HamiltonianModel")
            .field("dim", &self.dim())
            .field("family", &self.family)
            .field("growth_gamma", &self.growth_gamma)
            .field("smoothness", &self.smoothness)
            .finish()
    }
}

impl HamiltonianModel {
    pub fn from_parts(
        inner: Arc<dyn Hamiltonian>,
        growth_gamma: f64,
        smoothness: Smoothness,
        family: FamilyTag,
    ) -> Self {
        HamiltonianModel { inner, growth_gamma, smoothness, family }
    }

    pub fn dim(&self) -> usize {
        self.inner.dim()
    }
    pub fn eval(&self, x: &Vector, p: &Vector) -> f64 {
        self.inner.eval(x, p)
    }
    pub fn grad_p(&self, x: &Vector, p: &Vector) -> Result<Vector> {
        self.inner.grad_p(x, p)
    }
    pub fn grad_x(&self, x: &Vector, p: &Vector) -> Result<Vector> {
        self.inner.grad_x(x, p)
    }
    pub fn hessian(&self, x: &Vector, p: &Vector) -> Result<HessianBlocks> {
        self.inner.hessian(x, p)
    }
    pub fn velocity_samples(&self, x: &Vector, count: usize) -> Option<Vec<Vector>> {
        self.inner.velocity_samples(x, count)
    }
}

/// `F(x) = [-radius, radius]^n`, so `H(x, p) = radius * sum |p_i|`.
#[derive(Debug, Clone)]
pub struct IntervalBox {
    pub dim: usize,
    pub radius: f64,
}

impl IntervalBox {
    fn check(&self, p: &Vector) -> Result<()> {
        let guard = guard_radius(p);
        let smallest = p.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        if smallest < guard {
            return Err(Error::NonsmoothPoint { p_norm: smallest, guard });
        }
        Ok(())
    }
}

impl Hamiltonian for IntervalBox {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, _x: &Vector, p: &Vector) -> f64 {
        self.radius * p.iter().map(|v| v.abs()).sum::<f64>()
    }

    fn grad_p(&self, _x: &Vector, p: &Vector) -> Result<Vector> {
        self.check(p)?;
        Ok(p.map(|v| self.radius * v.signum()))
    }

    fn grad_x(&self, _x: &Vector, p: &Vector) -> Result<Vector> {
        self.check(p)?;
        Ok(Vector::zeros(self.dim))
    }

    fn hessian(&self, _x: &Vector, p: &Vector) -> Result<HessianBlocks> {
        self.check(p)?;
        Ok(HessianBlocks::zeros(self.dim))
    }

    fn velocity_samples(&self, _x: &Vector, _count: usize) -> Option<Vec<Vector>> {
        // corners of the box
        let n = self.dim;
        Some(
            (0..1usize << n)
                .map(|mask| {
                    Vector::from_fn(n, |i, _| {
                        if mask & (1 << i) != 0 { self.radius } else { -self.radius }
                    })
                })
                .collect(),
        )
    }
}

pub fn make_interval_box_model(dim: usize, radius: f64) -> Result<HamiltonianModel> {
    if dim == 0 {
        return Err(Error::ModelInvalid("interval box needs dim >= 1".into()));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::ModelInvalid(format!("interval box radius must be positive, got {radius}")));
    }
    Ok(HamiltonianModel::from_parts(
        Arc::new(IntervalBox { dim, radius }),
        // |v| <= radius * sqrt(n) <= gamma (1 + |x|)
        radius * (dim as f64).sqrt(),
        Smoothness::C21,
        FamilyTag::IntervalBox,
    ))
}

/// `f(x, u) = h(x) + g(x) u` with `u` in the closed unit ball of `R^m`:
/// `H(x, p) = <p, h(x)> + |g(x)^T p|`.
pub struct AffineControl {
    pub h: Arc<dyn Field>,
    pub g: Arc<dyn Field>,
    pub dim: usize,
    pub controls: usize,
}

struct AffinePoint {
    hx: Vector,
    g: Matrix,
    s_norm: f64,
    w: Vector,
}

impl AffineControl {
    fn g_matrix(&self, x: &Vector) -> Matrix {
        linalg::unpack(self.g.value(x).as_slice(), self.dim, self.controls)
    }

    /// `d g / d x_j` as an `n x m` matrix, from the flattened Jacobian.
    fn g_partials(&self, x: &Vector) -> Vec<Matrix> {
        let jac = self.g.jacobian(x);
        (0..self.dim)
            .map(|j| linalg::unpack(jac.column(j).as_slice(), self.dim, self.controls))
            .collect()
    }

    fn point(&self, x: &Vector, p: &Vector) -> Result<AffinePoint> {
        let hx = self.h.value(x);
        let g = self.g_matrix(x);
        let s = g.transpose() * p;
        let s_norm = s.norm();
        let guard = guard_radius(p);
        if s_norm < guard {
            return Err(Error::NonsmoothPoint { p_norm: s_norm, guard });
        }
        let w = &s / s_norm;
        Ok(AffinePoint { hx, g, s_norm, w })
    }
}

impl Hamiltonian for AffineControl {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &Vector, p: &Vector) -> f64 {
        p.dot(&self.h.value(x)) + (self.g_matrix(x).transpose() * p).norm()
    }

    fn grad_p(&self, x: &Vector, p: &Vector) -> Result<Vector> {
        let pt = self.point(x, p)?;
        Ok(pt.hx + pt.g * pt.w)
    }

    fn grad_x(&self, x: &Vector, p: &Vector) -> Result<Vector> {
        let pt = self.point(x, p)?;
        let jh = self.h.jacobian(x);
        let dg = self.g_partials(x);
        Ok(Vector::from_fn(self.dim, |j, _| {
            p.dot(&jh.column(j)) + p.dot(&(&dg[j] * &pt.w))
        }))
    }

    fn hessian(&self, x: &Vector, p: &Vector) -> Result<HessianBlocks> {
        let n = self.dim;
        let m = self.controls;
        let pt = self.point(x, p)?;
        let proj = (Matrix::identity(m, m) - &pt.w * pt.w.transpose()) / pt.s_norm;
        let jh = self.h.jacobian(x);
        let hh = self.h.hessians(x);
        let dg = self.g_partials(x);
        let ds: Vec<Vector> = dg.iter().map(|d| d.transpose() * p).collect();

        let pp = &pt.g * &proj * pt.g.transpose();

        let mut xp = Matrix::zeros(n, n);
        for j in 0..n {
            let col = jh.column(j) + &dg[j] * &pt.w + &pt.g * (&proj * &ds[j]);
            xp.set_column(j, &col);
        }

        // second partials of g, reshaped per (i, j)
        let gh = self.g.hessians(x);
        let mut xx = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let h_term: f64 = (0..n).map(|c| p[c] * hh[c][(i, j)]).sum();
                let dij_g = Matrix::from_fn(n, m, |r, c| gh[r + c * n][(i, j)]);
                let g_term = p.dot(&(dij_g * &pt.w));
                let curv = ds[j].dot(&(&proj * &ds[i]));
                xx[(i, j)] = h_term + g_term + curv;
            }
        }
        Ok(HessianBlocks { px: xp.transpose(), xp, xx: linalg::symmetrize(&xx), pp: linalg::symmetrize(&pp) })
    }

    fn velocity_samples(&self, x: &Vector, count: usize) -> Option<Vec<Vector>> {
        let hx = self.h.value(x);
        let g = self.g_matrix(x);
        let dirs = unit_sphere_samples(self.controls, count)?;
        Some(dirs.into_iter().map(|u| &hx + &g * u).collect())
    }
}

/// Deterministic directions on `S^{m-1}` for `m <= 3`.
pub fn unit_sphere_samples(m: usize, count: usize) -> Option<Vec<Vector>> {
    match m {
        1 => Some(vec![Vector::from_element(1, -1.0), Vector::from_element(1, 1.0)]),
        2 => {
            let k = count.max(3);
            Some(
                (0..k)
                    .map(|j| {
                        let a = 2.0 * std::f64::consts::PI * j as f64 / k as f64;
                        Vector::from_vec(vec![a.cos(), a.sin()])
                    })
                    .collect(),
            )
        }
        3 => {
            // Fibonacci lattice
            let k = count.max(4);
            let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
            Some(
                (0..k)
                    .map(|j| {
                        let z = 1.0 - 2.0 * (j as f64 + 0.5) / k as f64;
                        let r = (1.0 - z * z).sqrt();
                        let a = golden * j as f64;
                        Vector::from_vec(vec![r * a.cos(), r * a.sin(), z])
                    })
                    .collect(),
            )
        }
        _ => None,
    }
}

pub fn make_affine_control_model(
    h_field: Arc<dyn Field>,
    g_field: Arc<dyn Field>,
    dim: usize,
    controls: usize,
) -> Result<HamiltonianModel> {
    if dim == 0 {
        return Err(Error::ModelInvalid("affine model needs dim >= 1".into()));
    }
    if controls < dim {
        return Err(Error::ModelInvalid(format!("need m >= n, got m = {controls}, n = {dim}")));
    }
    if h_field.input_dim() != dim || h_field.output_dim() != dim {
        return Err(Error::ModelInvalid("h must map R^n to R^n".into()));
    }
    if g_field.input_dim() != dim || g_field.output_dim() != dim * controls {
        return Err(Error::ModelInvalid("g must map R^n to n x m matrices".into()));
    }
    let model = AffineControl { h: h_field, g: g_field, dim, controls };

    // full-rank probe on a small deterministic set of states
    let mut gamma: f64 = 0.0;
    for probe in rank_probes(dim) {
        let g = model.g_matrix(&probe);
        let sv = g.clone().singular_values();
        let smax = sv.iter().fold(0.0_f64, |a, &s| a.max(s));
        let smin = sv.iter().fold(f64::INFINITY, |a, &s| a.min(s));
        if !(smin > 1e-10 * smax) || smax == 0.0 {
            return Err(Error::ModelInvalid(format!(
                "g(x) is rank deficient at x = {:?} (singular values {:?})",
                probe.as_slice(),
                sv.as_slice()
            )));
        }
        let speed = model.h.value(&probe).norm() + smax;
        gamma = gamma.max(speed / (1.0 + probe.norm()));
    }
    Ok(HamiltonianModel::from_parts(Arc::new(model), gamma, Smoothness::C2, FamilyTag::AffineControl))
}

fn rank_probes(dim: usize) -> Vec<Vector> {
    let mut out = vec![Vector::zeros(dim)];
    for k in 0..dim {
        for s in [-1.0, 1.0] {
            let mut v = Vector::zeros(dim);
            v[k] = s;
            out.push(v);
        }
    }
    out.push(Vector::from_element(dim, 0.5));
    out
}

/// Unit ball dynamics `F(x) = B(0, 1)`, i.e. `H(x, p) = |p|`.
pub fn make_unit_ball_model(dim: usize) -> Result<HamiltonianModel> {
    make_affine_control_model(
        Arc::new(TermField::zero(dim, dim)),
        Arc::new(TermField::identity(dim)),
        dim,
        dim,
    )
}

type ScalarHam = dyn Fn(&Vector, &Vector) -> f64 + Send + Sync;
type VectorHam = dyn Fn(&Vector, &Vector) -> Vector + Send + Sync;
type BlockHam = dyn Fn(&Vector, &Vector) -> HessianBlocks + Send + Sync;

/// User-supplied Hamiltonian; any derivative not given is central-differenced.
pub struct CustomHamiltonian {
    dim: usize,
    eval: Box<ScalarHam>,
    grad_p: Option<Box<VectorHam>>,
    grad_x: Option<Box<VectorHam>>,
    hessian: Option<Box<BlockHam>>,
}

impl CustomHamiltonian {
    pub fn new(dim: usize, eval: impl Fn(&Vector, &Vector) -> f64 + Send + Sync + 'static) -> Self {
        CustomHamiltonian { dim, eval: Box::new(eval), grad_p: None, grad_x: None, hessian: None }
    }

    pub fn with_grad_p(mut self, f: impl Fn(&Vector, &Vector) -> Vector + Send + Sync + 'static) -> Self {
        self.grad_p = Some(Box::new(f));
        self
    }

    pub fn with_grad_x(mut self, f: impl Fn(&Vector, &Vector) -> Vector + Send + Sync + 'static) -> Self {
        self.grad_x = Some(Box::new(f));
        self
    }

    pub fn with_hessian(
        mut self,
        f: impl Fn(&Vector, &Vector) -> HessianBlocks + Send + Sync + 'static,
    ) -> Self {
        self.hessian = Some(Box::new(f));
        self
    }

    pub fn into_model(self, growth_gamma: f64, smoothness: Smoothness) -> HamiltonianModel {
        HamiltonianModel::from_parts(Arc::new(self), growth_gamma, smoothness, FamilyTag::Custom)
    }

    fn guard(&self, p: &Vector) -> Result<()> {
        let guard = guard_radius(p);
        if p.norm() < guard {
            return Err(Error::NonsmoothPoint { p_norm: p.norm(), guard });
        }
        Ok(())
    }

    fn fd_grad_p(&self, x: &Vector, p: &Vector) -> Vector {
        let h = fd_step(p);
        Vector::from_fn(self.dim, |i, _| {
            let mut a = p.clone();
            let mut b = p.clone();
            a[i] += h;
            b[i] -= h;
            ((self.eval)(x, &a) - (self.eval)(x, &b)) / (2.0 * h)
        })
    }

    fn fd_grad_x(&self, x: &Vector, p: &Vector) -> Vector {
        let h = fd_step(x);
        Vector::from_fn(self.dim, |i, _| {
            let mut a = x.clone();
            let mut b = x.clone();
            a[i] += h;
            b[i] -= h;
            ((self.eval)(&a, p) - (self.eval)(&b, p)) / (2.0 * h)
        })
    }
}

impl Hamiltonian for CustomHamiltonian {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, x: &Vector, p: &Vector) -> f64 {
        (self.eval)(x, p)
    }

    fn grad_p(&self, x: &Vector, p: &Vector) -> Result<Vector> {
        self.guard(p)?;
        Ok(match &self.grad_p {
            Some(f) => f(x, p),
            None => self.fd_grad_p(x, p),
        })
    }

    fn grad_x(&self, x: &Vector, p: &Vector) -> Result<Vector> {
        self.guard(p)?;
        Ok(match &self.grad_x {
            Some(f) => f(x, p),
            None => self.fd_grad_x(x, p),
        })
    }

    fn hessian(&self, x: &Vector, p: &Vector) -> Result<HessianBlocks> {
        self.guard(p)?;
        if let Some(f) = &self.hessian {
            return Ok(f(x, p));
        }
        let n = self.dim;
        let gp = |x: &Vector, p: &Vector| self.grad_p(x, p);
        let gx = |x: &Vector, p: &Vector| self.grad_x(x, p);
        let mut xp = Matrix::zeros(n, n);
        let mut pp = Matrix::zeros(n, n);
        let mut xx = Matrix::zeros(n, n);
        let hx = fd_step(x);
        let hp = fd_step(p);
        for j in 0..n {
            let (mut xa, mut xb) = (x.clone(), x.clone());
            xa[j] += hx;
            xb[j] -= hx;
            xp.set_column(j, &((gp(&xa, p)? - gp(&xb, p)?) / (2.0 * hx)));
            xx.set_column(j, &((gx(&xa, p)? - gx(&xb, p)?) / (2.0 * hx)));
            let (mut pa, mut pb) = (p.clone(), p.clone());
            pa[j] += hp;
            pb[j] -= hp;
            pp.set_column(j, &((gp(x, &pa)? - gp(x, &pb)?) / (2.0 * hp)));
        }
        Ok(HessianBlocks {
            px: xp.transpose(),
            xp,
            xx: linalg::symmetrize(&xx),
            pp: linalg::symmetrize(&pp),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostRegularity {
    Lipschitz,
    C11,
    C2,
    C2m(f64),
}

type ScalarCost = dyn Fn(&Vector) -> f64 + Send + Sync;
type VectorCost = dyn Fn(&Vector) -> Vector + Send + Sync;
type MatrixCost = dyn Fn(&Vector) -> Matrix + Send + Sync;

/// Terminal cost `phi` with its gradient and Hessian.
#[derive(Clone)]
pub struct TerminalCost {
    value: Arc<ScalarCost>,
    grad: Arc<VectorCost>,
    hess: Arc<MatrixCost>,
    pub regularity: CostRegularity,
    /// Whether `phi` is known to be locally semiconcave.
    pub semiconcave: bool,
}

impl std::fmt::Debug for TerminalCost {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TerminalCost")
            .field("regularity", &self.regularity)
            .field("semiconcave", &self.semiconcave)
            .finish()
    }
}

impl TerminalCost {
    pub fn new(
        value: impl Fn(&Vector) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&Vector) -> Vector + Send + Sync + 'static,
        hess: impl Fn(&Vector) -> Matrix + Send + Sync + 'static,
        regularity: CostRegularity,
    ) -> Self {
        TerminalCost {
            value: Arc::new(value),
            grad: Arc::new(grad),
            hess: Arc::new(hess),
            regularity,
            semiconcave: false,
        }
    }

    /// `phi(z) = 0.5 z^T A z + b^T z + c`; `A` is symmetrized.
    pub fn quadratic(a: Matrix, b: Vector, c: f64) -> Self {
        let a = linalg::symmetrize(&a);
        let (a1, a2, a3) = (a.clone(), a.clone(), a);
        let (b1, b2) = (b.clone(), b);
        TerminalCost::new(
            move |z| 0.5 * z.dot(&(&a1 * z)) + b1.dot(z) + c,
            move |z| &a2 * z + &b2,
            move |_| a3.clone(),
            CostRegularity::C2,
        )
        .semiconcave(true)
    }

    /// Scalar sum-of-terms cost with exact derivatives.
    pub fn from_terms(field: TermField) -> Self {
        let f = Arc::new(field);
        let (f1, f2, f3) = (f.clone(), f.clone(), f);
        TerminalCost::new(
            move |z| f1.value(z)[0],
            move |z| f2.jacobian(z).row(0).transpose(),
            move |z| f3.hessians(z).remove(0),
            CostRegularity::C2,
        )
    }

    pub fn semiconcave(mut self, flag: bool) -> Self {
        self.semiconcave = flag;
        self
    }

    pub fn value(&self, z: &Vector) -> f64 {
        (self.value)(z)
    }
    pub fn grad(&self, z: &Vector) -> Vector {
        (self.grad)(z)
    }
    pub fn hess(&self, z: &Vector) -> Matrix {
        (self.hess)(z)
    }

    /// Checks symmetric Hessians and gradient/value consistency at the given points.
    pub fn check_consistency(&self, points: &[Vector]) -> Result<()> {
        for z in points {
            let h = self.hess(z);
            if linalg::asymmetry(&h) > 1e-12 * (1.0 + linalg::op_norm(&h)) {
                return Err(Error::ModelInvalid(format!("cost Hessian not symmetric at {:?}", z.as_slice())));
            }
            let step = fd_step(z);
            let g = self.grad(z);
            let scale = 1.0 + g.norm() + self.value(z).abs();
            for i in 0..z.len() {
                let (mut a, mut b) = (z.clone(), z.clone());
                a[i] += step;
                b[i] -= step;
                let fd = (self.value(&a) - self.value(&b)) / (2.0 * step);
                if (fd - g[i]).abs() > 1e-6 * scale {
                    return Err(Error::ModelInvalid(format!(
                        "cost gradient component {i} inconsistent at {:?}: {} vs {fd}",
                        z.as_slice(),
                        g[i]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A Mayer problem: minimize `phi(x(T))` over trajectories of `F` from `(t0, x0)`.
#[derive(Debug, Clone)]
pub struct ControlScenario {
    pub model: HamiltonianModel,
    pub cost: TerminalCost,
    pub t0: f64,
    pub t1: f64,
    pub x0: Vector,
    pub label: String,
    /// When set, the reference arc is the characteristic ending here instead of the
    /// one shot from `x0`.
    pub terminal_state: Option<Vector>,
}

impl ControlScenario {
    pub fn new(
        model: HamiltonianModel,
        cost: TerminalCost,
        t0: f64,
        t1: f64,
        x0: Vector,
        label: impl Into<String>,
    ) -> Result<Self> {
        if !(t1 - t0 > 0.0) {
            return Err(Error::InvalidInput(format!("horizon requires T > t0, got t0 = {t0}, T = {t1}")));
        }
        if x0.len() != model.dim() {
            return Err(Error::InvalidInput(format!(
                "x0 has length {}, model dimension is {}",
                x0.len(),
                model.dim()
            )));
        }
        Ok(ControlScenario { model, cost, t0, t1, x0, label: label.into(), terminal_state: None })
    }

    pub fn with_terminal_state(mut self, z: Vector) -> Result<Self> {
        if z.len() != self.model.dim() {
            return Err(Error::InvalidInput("terminal state has wrong length".into()));
        }
        self.terminal_state = Some(z);
        Ok(self)
    }

    /// Same problem started from a different initial condition.
    pub fn restarted(&self, t0: f64, x0: Vector) -> Result<Self> {
        let mut s = ControlScenario::new(self.model.clone(), self.cost.clone(), t0, self.t1, x0, self.label.clone())?;
        s.terminal_state = None;
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }
}

/// Tolerances of the structural checks in [`validate_model`].
const IDENTITY_TOL: f64 = 1e-9;
const DEGENERACY_TOL: f64 = 1e-8;
const GRAD_FD_TOL: f64 = 1e-4;
const HESS_FD_TOL: f64 = 1e-3;

/// Samples `(x, z, p)` with `|x|, |z| <= radius`, `|p| = 1` and checks the support-function
/// structure of `H`. Residuals beyond tolerance become failing report nodes.
pub fn validate_model(
    model: &HamiltonianModel,
    sample_count: usize,
    radius: f64,
    seed: u64,
) -> Result<VerificationReport> {
    if sample_count == 0 {
        return Err(Error::InvalidInput("sample_count must be >= 1".into()));
    }
    let n = model.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = VerificationReport::new(
        format!("{:?}", model.family),
        "validate_model",
        format!("{sample_count} samples, |x|,|z| <= {radius}, |p| = 1"),
    );
    let mut semiconvexity: f64 = 0.0;
    let mut lipschitz: f64 = 0.0;
    let mut skipped = 0usize;

    for k in 0..sample_count {
        let t = k as f64;
        let x = sample_ball(&mut rng, n, radius);
        let z = sample_ball(&mut rng, n, radius);
        let p = sample_sphere(&mut rng, n);
        let hv = model.eval(&x, &p);

        let homog = [0.5, 2.0, 10.0]
            .iter()
            .map(|&l| (model.eval(&x, &(&p * l)) - l * hv).abs() / (l * (1.0 + hv.abs())))
            .fold(0.0, f64::max);
        report.push(ResidualNode::labeled(t, homog, IDENTITY_TOL, "homogeneity"));

        // semiconvexity surrogate in x
        let zn2 = z.norm_squared();
        if zn2 > 0.0 {
            let second = model.eval(&(&x + &z), &p) + model.eval(&(&x - &z), &p) - 2.0 * hv;
            semiconvexity = semiconvexity.max(-second / zn2);
        }

        let (gp, blocks) = match (model.grad_p(&x, &p), model.hessian(&x, &p)) {
            (Ok(g), Ok(b)) => (g, b),
            (Err(Error::NonsmoothPoint { .. }), _) | (_, Err(Error::NonsmoothPoint { .. })) => {
                skipped += 1;
                continue;
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };

        let euler = (hv - gp.dot(&p)).abs() / (1.0 + hv.abs());
        report.push(ResidualNode::labeled(t, euler, IDENTITY_TOL, "euler"));

        let min_eig = linalg::min_eigenvalue(&blocks.pp);
        report.push(ResidualNode::labeled(t, -min_eig, IDENTITY_TOL, "hpp_psd"));

        let pp_norm = linalg::op_norm(&blocks.pp);
        let degeneracy = (&blocks.pp * &p).norm();
        report.push(ResidualNode::labeled(
            t,
            degeneracy,
            DEGENERACY_TOL * pp_norm * p.norm() + 1e-14,
            "hpp_degeneracy",
        ));

        let sym = (&blocks.px - blocks.xp.transpose()).norm();
        report.push(ResidualNode::labeled(t, sym, 1e-12 * (1.0 + blocks.xp.norm()), "hpx_transpose"));

        if let Ok(gp_shift) = model.grad_p(&(&x + &z), &p) {
            if z.norm() > 0.0 {
                lipschitz = lipschitz.max((gp_shift - &gp).norm() / z.norm());
            }
        }

        // finite-difference consistency, away from coordinate kinks
        if p.iter().all(|v| v.abs() > 1e-3) {
            let gx = model.grad_x(&x, &p)?;
            let (fd_gp, fd_gx) = fd_gradients(model, &x, &p);
            let rel = |a: &Vector, b: &Vector| (a - b).norm() / (1.0 + b.norm());
            report.push(ResidualNode::labeled(t, rel(&fd_gp, &gp), GRAD_FD_TOL, "fd_grad_p"));
            report.push(ResidualNode::labeled(t, rel(&fd_gx, &gx), GRAD_FD_TOL, "fd_grad_x"));
            let fd_blocks = fd_hessian(model, &x, &p)?;
            let relm = |a: &Matrix, b: &Matrix| (a - b).norm() / (1.0 + b.norm());
            let worst = [
                relm(&fd_blocks.xx, &blocks.xx),
                relm(&fd_blocks.xp, &blocks.xp),
                relm(&fd_blocks.pp, &blocks.pp),
            ]
            .into_iter()
            .fold(0.0, f64::max);
            report.push(ResidualNode::labeled(t, worst, HESS_FD_TOL, "fd_hessian"));
        }
    }
    report.fit("semiconvexity_c", semiconvexity);
    report.fit("grad_p_lipschitz_x", lipschitz);
    report.fit("growth_gamma", model.growth_gamma);
    if skipped > 0 {
        report.note(format!("{skipped} samples fell in the nonsmooth guard cone and were skipped"));
    }
    Ok(report.conclude())
}

fn fd_gradients(model: &HamiltonianModel, x: &Vector, p: &Vector) -> (Vector, Vector) {
    let n = model.dim();
    let hp = fd_step(p);
    let hx = fd_step(x);
    let gp = Vector::from_fn(n, |i, _| {
        let (mut a, mut b) = (p.clone(), p.clone());
        a[i] += hp;
        b[i] -= hp;
        (model.eval(x, &a) - model.eval(x, &b)) / (2.0 * hp)
    });
    let gx = Vector::from_fn(n, |i, _| {
        let (mut a, mut b) = (x.clone(), x.clone());
        a[i] += hx;
        b[i] -= hx;
        (model.eval(&a, p) - model.eval(&b, p)) / (2.0 * hx)
    });
    (gp, gx)
}

fn fd_hessian(model: &HamiltonianModel, x: &Vector, p: &Vector) -> Result<HessianBlocks> {
    let n = model.dim();
    let hx = fd_step(x);
    let hp = fd_step(p);
    let mut xp = Matrix::zeros(n, n);
    let mut xx = Matrix::zeros(n, n);
    let mut pp = Matrix::zeros(n, n);
    for j in 0..n {
        let (mut xa, mut xb) = (x.clone(), x.clone());
        xa[j] += hx;
        xb[j] -= hx;
        xp.set_column(j, &((model.grad_p(&xa, p)? - model.grad_p(&xb, p)?) / (2.0 * hx)));
        xx.set_column(j, &((model.grad_x(&xa, p)? - model.grad_x(&xb, p)?) / (2.0 * hx)));
        let (mut pa, mut pb) = (p.clone(), p.clone());
        pa[j] += hp;
        pb[j] -= hp;
        pp.set_column(j, &((model.grad_p(x, &pa)? - model.grad_p(x, &pb)?) / (2.0 * hp)));
    }
    Ok(HessianBlocks { px: xp.transpose(), xp, xx, pp })
}

fn sample_ball(rng: &mut ChaCha8Rng, n: usize, radius: f64) -> Vector {
    loop {
        let v = Vector::from_fn(n, |_, _| rng.random_range(-1.0..=1.0));
        if v.norm() <= 1.0 {
            return v * radius;
        }
    }
}

fn sample_sphere(rng: &mut ChaCha8Rng, n: usize) -> Vector {
    loop {
        let v = Vector::from_fn(n, |_, _| rng.random_range(-1.0..=1.0));
        let r = v.norm();
        if r <= 1.0 && r > 1e-3 {
            return v / r;
        }
    }
}

/// Seeded samples shared with tests and validation helpers.
pub fn sample_points(seed: u64, count: usize, n: usize, radius: f64) -> Vec<Vector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| sample_ball(&mut rng, n, radius)).collect()
}

pub fn sample_directions(seed: u64, count: usize, n: usize) -> Vec<Vector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| sample_sphere(&mut rng, n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::TermFn;
    use crate::field::Term;
    use approx::assert_relative_eq;

    fn pendulum() -> HamiltonianModel {
        let h = TermField::new(
            2,
            vec![vec![Term::monomial(1.0, vec![0, 1])], vec![Term::trig(-1.0, TermFn::Sin, 0)]],
        )
        .unwrap();
        make_affine_control_model(Arc::new(h), Arc::new(TermField::identity(2)), 2, 2).unwrap()
    }

    #[test]
    fn box_support_function_and_gradient() {
        let m = make_interval_box_model(2, 0.5).unwrap();
        let x = Vector::zeros(2);
        let p = Vector::from_vec(vec![-2.0, 3.0]);
        assert_relative_eq!(m.eval(&x, &p), 2.5);
        assert_eq!(m.grad_p(&x, &p).unwrap(), Vector::from_vec(vec![-0.5, 0.5]));
        assert_eq!(m.hessian(&x, &p).unwrap(), HessianBlocks::zeros(2));
        assert_eq!(m.velocity_samples(&x, 0).unwrap().len(), 4);
    }

    #[test]
    fn box_kink_is_guarded() {
        let m = make_interval_box_model(2, 1.0).unwrap();
        let p = Vector::from_vec(vec![1.0, 0.0]);
        assert!(matches!(m.grad_p(&Vector::zeros(2), &p), Err(Error::NonsmoothPoint { .. })));
    }

    #[test]
    fn ball_blocks_match_projection() {
        let m = make_unit_ball_model(2).unwrap();
        let p = Vector::from_vec(vec![3.0, 4.0]);
        let x = Vector::from_vec(vec![0.3, -0.1]);
        assert_relative_eq!(m.eval(&x, &p), 5.0);
        let b = m.hessian(&x, &p).unwrap();
        let w = &p / 5.0;
        let expected = (Matrix::identity(2, 2) - &w * w.transpose()) / 5.0;
        assert_relative_eq!(b.pp, expected, epsilon = 1e-14);
        assert_relative_eq!((&b.pp * &p).norm(), 0.0, epsilon = 1e-14);
        assert_eq!(b.xx, Matrix::zeros(2, 2));
    }

    #[test]
    fn pendulum_has_state_curvature() {
        let m = pendulum();
        let x = Vector::from_vec(vec![0.7, 0.2]);
        let p = Vector::from_vec(vec![0.4, -1.1]);
        let b = m.hessian(&x, &p).unwrap();
        // <p, h(x)> contributes -p2 * sin(x1), second derivative p2 sin(x1) in x1
        assert_relative_eq!(b.xx[(0, 0)], p[1] * x[0].sin(), epsilon = 1e-12);
        let report = validate_model(&m, 100, 2.0, 3).unwrap();
        assert!(report.passed(), "{:?}", report.failing_nodes().collect::<Vec<_>>());
    }

    #[test]
    fn structural_validation_passes_on_builtin_families() {
        for m in [make_interval_box_model(2, 1.0).unwrap(), make_unit_ball_model(2).unwrap()] {
            let r = validate_model(&m, 100, 3.0, 11).unwrap();
            assert!(r.passed());
            assert!(r.fitted_constants["semiconvexity_c"] <= 1e-9);
        }
    }

    #[test]
    fn structural_validation_flags_non_homogeneous_h() {
        let m = CustomHamiltonian::new(1, |_, p| p[0] * p[0]).into_model(1.0, Smoothness::C2);
        let r = validate_model(&m, 20, 1.0, 0).unwrap();
        assert_eq!(r.verdict, crate::report::Verdict::Fail);
    }

    #[test]
    fn rank_deficient_control_matrix_rejected() {
        let g = TermField::constant_matrix(2, &Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]));
        let r = make_affine_control_model(Arc::new(TermField::zero(2, 2)), Arc::new(g), 2, 2);
        assert!(matches!(r, Err(Error::ModelInvalid(_))));
        assert!(make_interval_box_model(1, 0.0).is_err());
    }

    #[test]
    fn quadratic_cost_is_consistent() {
        let a = Matrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, -1.0]);
        let c = TerminalCost::quadratic(a.clone(), Vector::from_vec(vec![1.0, 0.0]), 0.5);
        let z = Vector::from_vec(vec![1.0, 2.0]);
        assert_relative_eq!(c.value(&z), 0.5 * (2.0 + 4.0 - 4.0) + 1.0 + 0.5);
        assert_eq!(c.hess(&z), a);
        c.check_consistency(&sample_points(1, 10, 2, 2.0)).unwrap();
        let bad = TerminalCost::new(|z| z[0] * z[0], |z| z * 3.0, |_| Matrix::identity(1, 1), CostRegularity::C2);
        assert!(bad.check_consistency(&[Vector::from_element(1, 1.0)]).is_err());
    }

    #[test]
    fn scenario_rejects_empty_horizon() {
        let m = make_interval_box_model(1, 1.0).unwrap();
        let c = TerminalCost::quadratic(Matrix::identity(1, 1) * 2.0, Vector::zeros(1), 0.0);
        assert!(ControlScenario::new(m.clone(), c.clone(), 1.0, 1.0, Vector::zeros(1), "x").is_err());
        assert!(ControlScenario::new(m, c, 0.0, 1.0, Vector::zeros(2), "x").is_err());
    }

    #[test]
    fn sphere_samples_lie_on_sphere() {
        for m in 1..=3 {
            for v in unit_sphere_samples(m, 16).unwrap() {
                assert_relative_eq!(v.norm(), 1.0, epsilon = 1e-12);
            }
        }
        assert!(unit_sphere_samples(4, 16).is_none());
    }
}
