//! Independent numerical oracles: fixed-step RK4 integration of the defining
//! ODEs of the augmented system and composite trapezoid quadrature.
//!
//! These only use `hat_matrices` (the right-hand side), never the closed
//! forms they are meant to check.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{hat_matrices, AugmentedConfig};
use crate::error::Result;

/// Classical RK4 for `y' = f(t, y)` on `[t0, t1]` with `steps` equal steps.
pub fn rk4<F>(f: F, y0: DMatrix<f64>, t0: f64, t1: f64, steps: usize) -> Result<DMatrix<f64>>
where
    F: Fn(f64, &DMatrix<f64>) -> Result<DMatrix<f64>>,
{
    let h = (t1 - t0) / steps as f64;
    let mut y = y0;
    for i in 0..steps {
        let t = t0 + i as f64 * h;
        let k1 = f(t, &y)?;
        let k2 = f(t + 0.5 * h, &(&y + &k1 * (0.5 * h)))?;
        let k3 = f(t + 0.5 * h, &(&y + &k2 * (0.5 * h)))?;
        let k4 = f(t + h, &(&y + &k3 * h))?;
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    Ok(y)
}

/// `Phi' = A_hat Phi`, `Phi(0) = I`.
pub fn transition_rk4(n_vars: usize, t: f64, steps: usize) -> Result<DMatrix<f64>> {
    rk4(
        |s, phi| Ok(hat_matrices(n_vars, s)?.0 * phi),
        DMatrix::identity(n_vars, n_vars),
        0.0,
        t,
        steps,
    )
}

/// `mu' = A_hat mu + b_hat`, `mu(0) = 0`.
pub fn mean_rk4(n_vars: usize, t: f64, steps: usize) -> Result<DVector<f64>> {
    let mu = rk4(
        |s, mu| {
            let (a, b) = hat_matrices(n_vars, s)?;
            let mut out = a * mu;
            out.column_mut(0).axpy(1.0, &b, 1.0);
            Ok(out)
        },
        DMatrix::zeros(n_vars, 1),
        0.0,
        t,
        steps,
    )?;
    Ok(mu.column(0).into_owned())
}

/// `Sigma' = A_hat Sigma + Sigma A_hat^T`, `Sigma(0) = Sigma0`.
pub fn covariance_rk4(config: &AugmentedConfig, t: f64, steps: usize) -> Result<DMatrix<f64>> {
    let n = config.n_vars();
    rk4(
        |s, sigma| {
            let a = hat_matrices(n, s)?.0;
            Ok(&a * sigma + sigma * a.transpose())
        },
        config.sigma0().clone(),
        0.0,
        t,
        steps,
    )
}

/// Conditional trajectory `x' = A_hat x + b_hat x1` of a scalar-data state
/// (one entry per variable) from `t0` to `t1`.
pub fn conditional_path_rk4(
    x0: &DVector<f64>,
    x1: f64,
    t0: f64,
    t1: f64,
    steps: usize,
) -> Result<DVector<f64>> {
    let n = x0.len();
    let x = rk4(
        |s, x| {
            let (a, b) = hat_matrices(n, s)?;
            let mut out = a * x;
            out.column_mut(0).axpy(x1, &b, 1.0);
            Ok(out)
        },
        DMatrix::from_column_slice(n, 1, x0.as_slice()),
        t0,
        t1,
        steps,
    )?;
    Ok(x.column(0).into_owned())
}

/// Composite trapezoid rule with `intervals` equal panels.
pub fn trapezoid<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, intervals: usize) -> f64 {
    let h = (b - a) / intervals as f64;
    let inner: f64 = (1..intervals).map(|i| f(a + i as f64 * h)).sum();
    h * (0.5 * (f(a) + f(b)) + inner)
}
