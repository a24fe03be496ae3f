//! Fixed-step classical Runge-Kutta.

use crate::error::Result;
use crate::linalg::Vector;

/// One classical RK4 step of `y' = f(t, y)` from `t` with step `h`.
pub fn rk4_step<F>(f: &F, t: f64, y: &Vector, h: f64) -> Result<Vector>
where
    F: Fn(f64, &Vector) -> Result<Vector>,
{
    let k1 = f(t, y)?;
    let k2 = f(t + 0.5 * h, &(y + &k1 * (0.5 * h)))?;
    let k3 = f(t + 0.5 * h, &(y + &k2 * (0.5 * h)))?;
    let k4 = f(t + h, &(y + &k3 * h))?;
    Ok(y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

/// Uniform grid of `steps + 1` nodes on `[t0, t1]`; the last node is exactly `t1`.
pub fn uniform_times(t0: f64, t1: f64, steps: usize) -> Vec<f64> {
    let dt = (t1 - t0) / steps as f64;
    (0..=steps)
        .map(|i| if i == steps { t1 } else { t0 + dt * i as f64 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn endpoint_error(steps: usize) -> f64 {
        // y' = -y on [0,1]
        let f = |_t: f64, y: &Vector| Ok(-y);
        let h = 1.0 / steps as f64;
        let mut y = Vector::from_element(1, 1.0);
        for i in 0..steps {
            y = rk4_step(&f, i as f64 * h, &y, h).unwrap();
        }
        (y[0] - (-1.0_f64).exp()).abs()
    }

    #[test]
    fn fourth_order_convergence() {
        let ratio = endpoint_error(20) / endpoint_error(40);
        assert!(ratio > 14.0 && ratio < 18.0, "ratio {ratio}");
    }

    #[test]
    fn uniform_grid_ends_exactly() {
        let ts = uniform_times(-0.5, 1.0, 7);
        assert_eq!(ts.len(), 8);
        assert_eq!(ts[7], 1.0);
        assert_eq!(ts[0], -0.5);
    }
}
