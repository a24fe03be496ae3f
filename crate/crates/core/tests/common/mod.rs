#![allow(dead_code)]

use std::sync::OnceLock;

use mayer_sens::hamiltonian::{make_interval_box_model, make_unit_ball_model, ControlScenario, TerminalCost};
use mayer_sens::hjb::{solve_value_function, GridSpec, GridValueFunction};
use mayer_sens::{Matrix, Vector};

pub fn v1(x: f64) -> Vector {
    Vector::from_element(1, x)
}

pub fn v2(a: f64, b: f64) -> Vector {
    Vector::from_vec(vec![a, b])
}

pub fn m1(x: f64) -> Matrix {
    Matrix::from_element(1, 1, x)
}

/// `F = [-1, 1]`, `phi(z) = z^2`, `[0, 1]`, `x0 = 2`.
pub fn box_1d() -> ControlScenario {
    let model = make_interval_box_model(1, 1.0).unwrap();
    let cost = TerminalCost::quadratic(m1(2.0), Vector::zeros(1), 0.0);
    ControlScenario::new(model, cost, 0.0, 1.0, v1(2.0), "box_1d").unwrap()
}

/// Closed-form value of [`box_1d`].
pub fn box_value(t: f64, x: f64) -> f64 {
    if x >= 1.0 - t {
        (x + t - 1.0).powi(2)
    } else if x <= t - 1.0 {
        (x - t + 1.0).powi(2)
    } else {
        0.0
    }
}

pub fn box_spec(points: usize, steps: usize) -> GridSpec {
    GridSpec { dim: 1, lower: vec![-3.0], upper: vec![3.0], points_per_axis: points, time_steps: steps, t0: 0.0, t1: 1.0 }
}

pub fn box_grid() -> &'static GridValueFunction {
    static GRID: OnceLock<GridValueFunction> = OnceLock::new();
    GRID.get_or_init(|| solve_value_function(&box_1d(), &box_spec(401, 400), 2).unwrap())
}

/// Unit-ball inclusion, `phi(z) = -|z|^2 / 2`, `[-0.5, 1]`, arc ending at `(1, 0)`.
pub fn ball_2d() -> ControlScenario {
    let model = make_unit_ball_model(2).unwrap();
    let cost = TerminalCost::quadratic(-Matrix::identity(2, 2), Vector::zeros(2), 0.0);
    ControlScenario::new(model, cost, -0.5, 1.0, v2(-0.5, 0.0), "ball_2d")
        .unwrap()
        .with_terminal_state(v2(1.0, 0.0))
        .unwrap()
}

pub fn ball_value(t: f64, x: &Vector) -> f64 {
    -(x.norm() + 1.0 - t).powi(2) / 2.0
}

pub fn ball_spec(points: usize, steps: usize, t0: f64) -> GridSpec {
    GridSpec {
        dim: 2,
        lower: vec![-3.0, -3.0],
        upper: vec![3.0, 3.0],
        points_per_axis: points,
        time_steps: steps,
        t0,
        t1: 1.0,
    }
}

pub fn ball_grid() -> &'static GridValueFunction {
    static GRID: OnceLock<GridValueFunction> = OnceLock::new();
    GRID.get_or_init(|| solve_value_function(&ball_2d(), &ball_spec(241, 100, -0.5), 64).unwrap())
}
