//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Operator norm (largest singular value).
pub fn op_norm(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    if !m.iter().all(|v| v.is_finite()) {
        return f64::INFINITY;
    }
    m.clone()
        .singular_values()
        .iter()
        .fold(0.0_f64, |acc, &s| acc.max(s))
}

pub fn min_singular_value(m: &Matrix) -> f64 {
    m.clone()
        .singular_values()
        .iter()
        .fold(f64::INFINITY, |acc, &s| acc.min(s))
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &Matrix) -> f64 {
    let sym = symmetrize(m);
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |acc, &l| acc.min(l))
}

pub fn max_abs_eigenvalue(m: &Matrix) -> f64 {
    let sym = symmetrize(m);
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .fold(0.0_f64, |acc, &l| acc.max(l.abs()))
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// `|m - m^T|` in the operator norm.
pub fn asymmetry(m: &Matrix) -> f64 {
    op_norm(&(m - m.transpose()))
}

pub fn lerp(a: &Vector, b: &Vector, theta: f64) -> Vector {
    a * (1.0 - theta) + b * theta
}

pub(crate) fn pack(m: &Matrix) -> Vector {
    Vector::from_column_slice(m.as_slice())
}

pub(crate) fn unpack(v: &[f64], rows: usize, cols: usize) -> Matrix {
    Matrix::from_column_slice(rows, cols, v)
}
