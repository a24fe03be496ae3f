//! Smooth maps `R^n -> R^k` used to build affine-control dynamics and terminal costs.
//!
//! [`TermField`] carries exact first and second derivatives. [`ClosureField`] wraps an
//! arbitrary function and falls back to central differences.

use serde::{Deserialize, Serialize};

use crate::linalg::{Matrix, Vector};

/// Relative step for central finite differences: `1e-5 * (1 + |arg|)`.
pub const FD_REL_STEP: f64 = 1e-5;

pub fn fd_step(arg: &Vector) -> f64 {
    FD_REL_STEP * (1.0 + arg.norm())
}

pub trait Field: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn value(&self, x: &Vector) -> Vector;

    /// `k x n` Jacobian.
    fn jacobian(&self, x: &Vector) -> Matrix {
        fd_jacobian(|y| self.value(y), x, self.output_dim())
    }

    /// One `n x n` Hessian per output component.
    fn hessians(&self, x: &Vector) -> Vec<Matrix> {
        let n = self.input_dim();
        let k = self.output_dim();
        let h = fd_step(x);
        let mut out = vec![Matrix::zeros(n, n); k];
        for j in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let d = (self.jacobian(&xp) - self.jacobian(&xm)) / (2.0 * h);
            for (c, hess) in out.iter_mut().enumerate() {
                for i in 0..n {
                    hess[(i, j)] = d[(c, i)];
                }
            }
        }
        out.iter().map(crate::linalg::symmetrize).collect()
    }
}

/// Central-difference Jacobian of `f` at `x`.
pub fn fd_jacobian<F: Fn(&Vector) -> Vector>(f: F, x: &Vector, out_dim: usize) -> Matrix {
    let n = x.len();
    let h = fd_step(x);
    let mut jac = Matrix::zeros(out_dim, n);
    for j in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let col = (f(&xp) - f(&xm)) / (2.0 * h);
        jac.set_column(j, &col);
    }
    jac
}

/// Elementary factor applied to a monomial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TermFn {
    #[default]
    None,
    Sin,
    Cos,
}

/// `coef * prod_i x_i^pow_i * func(x_arg)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub coef: f64,
    #[serde(default)]
    pub pow: Vec<u32>,
    #[serde(default)]
    pub func: TermFn,
    #[serde(default)]
    pub arg: usize,
}

impl Term {
    pub fn constant(coef: f64) -> Self {
        Term { coef, pow: Vec::new(), func: TermFn::None, arg: 0 }
    }

    pub fn monomial(coef: f64, pow: Vec<u32>) -> Self {
        Term { coef, pow, func: TermFn::None, arg: 0 }
    }

    pub fn trig(coef: f64, func: TermFn, arg: usize) -> Self {
        Term { coef, pow: Vec::new(), func, arg }
    }

    fn power(&self, i: usize) -> u32 {
        self.pow.get(i).copied().unwrap_or(0)
    }

    fn monomial_parts(&self, x: &Vector) -> (f64, Vector, Matrix) {
        let n = x.len();
        // x_i^k and its first two derivatives
        let parts: Vec<(f64, f64, f64)> = (0..n)
            .map(|i| {
                let k = self.power(i) as i32;
                let xi = x[i];
                let v = xi.powi(k);
                let d1 = if k >= 1 { k as f64 * xi.powi(k - 1) } else { 0.0 };
                let d2 = if k >= 2 { (k * (k - 1)) as f64 * xi.powi(k - 2) } else { 0.0 };
                (v, d1, d2)
            })
            .collect();
        let prod_except = |skip: &[usize]| -> f64 {
            (0..n).filter(|i| !skip.contains(i)).map(|i| parts[i].0).product()
        };
        let value = prod_except(&[]);
        let grad = Vector::from_fn(n, |j, _| parts[j].1 * prod_except(&[j]));
        let hess = Matrix::from_fn(n, n, |i, j| {
            if i == j {
                parts[i].2 * prod_except(&[i])
            } else {
                parts[i].1 * parts[j].1 * prod_except(&[i, j])
            }
        });
        (value, grad, hess)
    }

    fn func_parts(&self, x: &Vector) -> (f64, Vector, Matrix) {
        let n = x.len();
        let mut grad = Vector::zeros(n);
        let mut hess = Matrix::zeros(n, n);
        let value = match self.func {
            TermFn::None => return (1.0, grad, hess),
            TermFn::Sin => {
                let a = x[self.arg];
                grad[self.arg] = a.cos();
                hess[(self.arg, self.arg)] = -a.sin();
                a.sin()
            }
            TermFn::Cos => {
                let a = x[self.arg];
                grad[self.arg] = -a.sin();
                hess[(self.arg, self.arg)] = -a.cos();
                a.cos()
            }
        };
        (value, grad, hess)
    }

    pub fn value(&self, x: &Vector) -> f64 {
        let (m, _, _) = self.monomial_parts(x);
        let (f, _, _) = self.func_parts(x);
        self.coef * m * f
    }

    pub fn gradient(&self, x: &Vector) -> Vector {
        let (m, dm, _) = self.monomial_parts(x);
        let (f, df, _) = self.func_parts(x);
        (dm * f + df * m) * self.coef
    }

    pub fn hessian(&self, x: &Vector) -> Matrix {
        let (m, dm, hm) = self.monomial_parts(x);
        let (f, df, hf) = self.func_parts(x);
        (hm * f + &dm * df.transpose() + &df * dm.transpose() + hf * m) * self.coef
    }

    pub(crate) fn validate(&self, n: usize) -> Result<(), String> {
        if self.pow.len() > n {
            return Err(format!("term has {} exponents for dimension {n}", self.pow.len()));
        }
        if self.func != TermFn::None && self.arg >= n {
            return Err(format!("term argument index {} out of range for dimension {n}", self.arg));
        }
        if !self.coef.is_finite() {
            return Err("term coefficient is not finite".into());
        }
        Ok(())
    }
}

/// Sum-of-terms field with exact derivatives; component `c` is `sum(components[c])`.
#[derive(Debug, Clone, PartialEq)]
pub struct TermField {
    dim: usize,
    components: Vec<Vec<Term>>,
}

impl TermField {
    pub fn new(dim: usize, components: Vec<Vec<Term>>) -> Result<Self, String> {
        for comp in &components {
            for t in comp {
                t.validate(dim)?;
            }
        }
        Ok(TermField { dim, components })
    }

    pub fn zero(dim: usize, out: usize) -> Self {
        TermField { dim, components: vec![Vec::new(); out] }
    }

    /// Constant matrix field, flattened column-major to match [`Field`] conventions for `g`.
    pub fn constant_matrix(dim: usize, m: &Matrix) -> Self {
        let components = m.iter().map(|&v| vec![Term::constant(v)]).collect();
        TermField { dim, components }
    }

    pub fn identity(dim: usize) -> Self {
        Self::constant_matrix(dim, &Matrix::identity(dim, dim))
    }
}

impl Field for TermField {
    fn input_dim(&self) -> usize {
        self.dim
    }

    fn output_dim(&self) -> usize {
        self.components.len()
    }

    fn value(&self, x: &Vector) -> Vector {
        Vector::from_iterator(
            self.components.len(),
            self.components.iter().map(|c| c.iter().map(|t| t.value(x)).sum::<f64>()),
        )
    }

    fn jacobian(&self, x: &Vector) -> Matrix {
        let mut jac = Matrix::zeros(self.components.len(), self.dim);
        for (c, comp) in self.components.iter().enumerate() {
            for t in comp {
                let g = t.gradient(x);
                for j in 0..self.dim {
                    jac[(c, j)] += g[j];
                }
            }
        }
        jac
    }

    fn hessians(&self, x: &Vector) -> Vec<Matrix> {
        self.components
            .iter()
            .map(|comp| {
                comp.iter()
                    .fold(Matrix::zeros(self.dim, self.dim), |acc, t| acc + t.hessian(x))
            })
            .collect()
    }
}

type VecFn = dyn Fn(&Vector) -> Vector + Send + Sync;

/// Field backed by an arbitrary function; derivatives by central differences.
pub struct ClosureField {
    dim: usize,
    out: usize,
    f: Box<VecFn>,
}

impl ClosureField {
    pub fn new(dim: usize, out: usize, f: impl Fn(&Vector) -> Vector + Send + Sync + 'static) -> Self {
        ClosureField { dim, out, f: Box::new(f) }
    }
}

impl Field for ClosureField {
    fn input_dim(&self) -> usize {
        self.dim
    }
    fn output_dim(&self) -> usize {
        self.out
    }
    fn value(&self, x: &Vector) -> Vector {
        (self.f)(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sample_field() -> TermField {
        // (x0^2 x1, -3 sin(x0) + x1^3, 0.5 cos(x1) x0)
        TermField::new(
            2,
            vec![
                vec![Term::monomial(1.0, vec![2, 1])],
                vec![Term::trig(-3.0, TermFn::Sin, 0), Term::monomial(1.0, vec![0, 3])],
                vec![Term { coef: 0.5, pow: vec![1, 0], func: TermFn::Cos, arg: 1 }],
            ],
        )
        .unwrap()
    }

    #[test]
    fn analytic_jacobian_matches_differences() {
        let f = sample_field();
        let x = Vector::from_vec(vec![0.7, -1.3]);
        let fd = fd_jacobian(|y| f.value(y), &x, 3);
        assert_relative_eq!(f.jacobian(&x), fd, epsilon = 1e-8);
    }

    #[test]
    fn analytic_hessians_match_differences() {
        let f = sample_field();
        let x = Vector::from_vec(vec![0.4, 0.9]);
        let closure = ClosureField::new(2, 3, move |y| sample_field().value(y));
        for (a, b) in f.hessians(&x).iter().zip(closure.hessians(&x)) {
            assert_relative_eq!(*a, b, epsilon = 1e-5);
        }
    }

    #[test]
    fn rejects_bad_argument_index() {
        assert!(TermField::new(1, vec![vec![Term::trig(1.0, TermFn::Sin, 3)]]).is_err());
    }
}
