//! Closed-form coefficients of the `N`-variable augmented system.
//!
//! The system is a chain of integrators `x^(k)' = x^(k+1)`, `x^(N-1)' = F`,
//! where `F` is the constant control that steers `x^(0)` onto the data
//! prediction at `t = 1`. Substituting that control gives the closed loop
//! `x' = A_hat(t) x + b_hat(t) x1`, whose transition matrix, mean and
//! covariance are all polynomial in `t`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{
    asymmetry, cholesky_from_factor, factorial, guarded_cholesky, guarded_factor, symmetrize, unit,
};

pub const MAX_VARS: usize = 8;
pub const DEFAULT_DELTA: f64 = 1e-3;

/// Prior and clamp settings of the augmented system.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedConfig {
    n_vars: usize,
    sigma0: DMatrix<f64>,
    k_scale: f64,
    t_clamp_delta: f64,
}

impl AugmentedConfig {
    /// Canonical prior `diag(1, ..., 1, k)`.
    pub fn new(n_vars: usize, k_scale: f64, t_clamp_delta: f64) -> Result<Self> {
        if !(k_scale > 0.0 && k_scale.is_finite()) {
            return Err(Error::OutOfRange {
                what: "k_scale",
                value: k_scale,
                range: "(0, inf)",
            });
        }
        Self::check_n(n_vars)?;
        let mut sigma0 = DMatrix::identity(n_vars, n_vars);
        sigma0[(n_vars - 1, n_vars - 1)] = k_scale;
        Self::build(n_vars, sigma0, k_scale, t_clamp_delta)
    }

    /// Arbitrary symmetric positive-definite prior covariance.
    pub fn with_sigma0(sigma0: DMatrix<f64>, t_clamp_delta: f64) -> Result<Self> {
        let n_vars = sigma0.nrows();
        Self::check_n(n_vars)?;
        if sigma0.ncols() != n_vars {
            return Err(Error::DimensionMismatch {
                expected: n_vars,
                got: sigma0.ncols(),
            });
        }
        Self::build(n_vars, sigma0, 1.0, t_clamp_delta)
    }

    fn check_n(n_vars: usize) -> Result<()> {
        if n_vars == 0 || n_vars > MAX_VARS {
            return Err(Error::InvalidConfig(format!(
                "n_vars must be in 1..={MAX_VARS}, got {n_vars}"
            )));
        }
        Ok(())
    }

    fn build(n_vars: usize, sigma0: DMatrix<f64>, k_scale: f64, delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta < 0.5) {
            return Err(Error::OutOfRange {
                what: "t_clamp_delta",
                value: delta,
                range: "(0, 0.5)",
            });
        }
        if sigma0.iter().any(|v| !v.is_finite()) || asymmetry(&sigma0) > 1e-12 {
            return Err(Error::InvalidConfig(
                "sigma0 must be finite and symmetric".into(),
            ));
        }
        guarded_cholesky(&sigma0)?;
        Ok(Self {
            n_vars,
            sigma0: symmetrize(&sigma0),
            k_scale,
            t_clamp_delta: delta,
        })
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn sigma0(&self) -> &DMatrix<f64> {
        &self.sigma0
    }

    pub fn k_scale(&self) -> f64 {
        self.k_scale
    }

    pub fn delta(&self) -> f64 {
        self.t_clamp_delta
    }

    /// Final schedule time `1 - delta`.
    pub fn t_final(&self) -> f64 {
        1.0 - self.t_clamp_delta
    }

    pub fn is_diagonal_prior(&self) -> bool {
        let n = self.n_vars;
        (0..n).all(|i| (0..n).all(|j| i == j || self.sigma0[(i, j)] == 0.0))
    }
}

/// The `N` stacked variables, one row per variable, one column per data dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub vars: DMatrix<f64>,
    pub t: f64,
}

impl AugmentedState {
    pub fn new(vars: DMatrix<f64>, t: f64) -> Self {
        Self { vars, t }
    }

    pub fn from_rows(rows: &[DVector<f64>], t: f64) -> Self {
        let d = rows.first().map_or(0, |r| r.len());
        let vars = DMatrix::from_fn(rows.len(), d, |n, j| rows[n][j]);
        Self { vars, t }
    }

    pub fn n_vars(&self) -> usize {
        self.vars.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vars.ncols()
    }

    pub fn var(&self, n: usize) -> DVector<f64> {
        self.vars.row(n).transpose()
    }

    pub fn is_finite(&self) -> bool {
        self.vars.iter().all(|v| v.is_finite())
    }
}

/// `exp(dt * A)` for the nilpotent upper shift `A`; entry `(k, m)` is
/// `dt^(m-k) / (m-k)!` above the diagonal.
pub fn shift_transition(n_vars: usize, dt: f64) -> DMatrix<f64> {
    DMatrix::from_fn(n_vars, n_vars, |k, m| {
        if m >= k {
            dt.powi((m - k) as i32) / factorial(m - k)
        } else {
            0.0
        }
    })
}

/// The closed-loop pair `(A_hat, b_hat)` at time `t < 1`.
pub fn hat_matrices(n_vars: usize, t: f64) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::OutOfRange {
            what: "t",
            value: t,
            range: "[0, 1)",
        });
    }
    let n = n_vars;
    let s = 1.0 - t;
    let nf = factorial(n);
    let mut a_hat = DMatrix::zeros(n, n);
    for k in 0..n.saturating_sub(1) {
        a_hat[(k, k + 1)] = 1.0;
    }
    for m in 0..n {
        a_hat[(n - 1, m)] -= nf * s.powi(m as i32) / (factorial(m) * s.powi(n as i32));
    }
    let mut b_hat = DVector::zeros(n);
    b_hat[n - 1] = nf / s.powi(n as i32);
    Ok((a_hat, b_hat))
}

/// Controlled transition matrix `Phi_hat(t, 0)` of `A_hat`, a polynomial in `t`.
pub fn controlled_transition(n_vars: usize, t: f64) -> DMatrix<f64> {
    let n = n_vars;
    let nf = factorial(n);
    DMatrix::from_fn(n, n, |k, m| {
        let control = nf * t.powi((n - k) as i32) / (factorial(n - k) * factorial(m));
        if m >= k {
            t.powi((m - k) as i32) / factorial(m - k) - control
        } else {
            -control
        }
    })
}

/// Mean coefficients `mu_t` multiplying `x1`: `mu^(k) = N! t^(N-k) / (N-k)!`.
pub fn mean_vector(n_vars: usize, t: f64) -> DVector<f64> {
    let n = n_vars;
    let nf = factorial(n);
    DVector::from_fn(n, |k, _| nf * t.powi((n - k) as i32) / factorial(n - k))
}

/// `Sigma_t = Phi_hat Sigma0 Phi_hat^T`, guarded against near-singularity.
pub fn covariance(config: &AugmentedConfig, t: f64) -> Result<DMatrix<f64>> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::OutOfRange {
            what: "t",
            value: t,
            range: "[0, 1)",
        });
    }
    let phi = controlled_transition(config.n_vars(), t);
    let sigma = symmetrize(&(&phi * config.sigma0() * phi.transpose()));
    guarded_cholesky(&sigma)?;
    Ok(sigma)
}

/// Reweighting vector and effective SNR: `gamma = mu^T Sigma^-1 mu`,
/// `r = Sigma^-1 mu / gamma`.
///
/// At `mu = 0` (t = 0) the formula is undefined and the `t -> 0` direction
/// `Sigma^-1 e / (e^T Sigma^-1 e)` is returned with `gamma = 0`, `e` selecting
/// the last variable.
pub fn reweight(mu: &DVector<f64>, sigma: &DMatrix<f64>) -> Result<(DVector<f64>, f64)> {
    let n = mu.len();
    if sigma.nrows() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: sigma.nrows(),
        });
    }
    let chol = guarded_cholesky(sigma)?;
    if mu.iter().all(|v| *v == 0.0) {
        let e = unit(n, n - 1);
        let s = chol.solve(&e);
        let norm = s[n - 1];
        return Ok((s / norm, 0.0));
    }
    let s = chol.solve(mu);
    let gamma = mu.dot(&s);
    Ok((s / gamma, gamma))
}

/// Endpoint frame `z = exp((1 - t) A) x`: `z^(k)` is the value derivative `k`
/// would reach at `t = 1` with zero force. In this frame the homogeneous
/// transition only mixes the first column, and the strongly graded
/// covariance of the augmented system stays well conditioned after diagonal
/// scaling, so all `N x N` solves go through it.
pub fn endpoint_frame(n_vars: usize, t: f64) -> DMatrix<f64> {
    shift_transition(n_vars, 1.0 - t)
}

/// Closed-loop transition `Psi(t, 0)` in the endpoint frame:
/// `z^(0)_t = (1-t)^N z^(0)_0`, `z^(k)_t = z^(k)_0 - N!/(N-k)! (1 - (1-t)^(N-k)) z^(0)_0`.
pub fn endpoint_transition(n_vars: usize, t: f64) -> DMatrix<f64> {
    let n = n_vars;
    let s = 1.0 - t;
    let mut psi = DMatrix::identity(n, n);
    psi[(0, 0)] = s.powi(n as i32);
    for k in 1..n {
        psi[(k, 0)] = -factorial(n) / factorial(n - k) * one_minus_pow(s, n - k);
    }
    psi
}

/// Mean coefficients in the endpoint frame: `N!/(N-k)! (1 - (1-t)^(N-k))`.
pub fn endpoint_mean(n_vars: usize, t: f64) -> DVector<f64> {
    let n = n_vars;
    let s = 1.0 - t;
    DVector::from_fn(n, |k, _| {
        factorial(n) / factorial(n - k) * one_minus_pow(s, n - k)
    })
}

/// `1 - s^m` without cancellation for `s` near 1.
fn one_minus_pow(s: f64, m: usize) -> f64 {
    -(m as f64 * (s - 1.0).ln_1p()).exp_m1()
}

/// Coefficients of the augmented system at one time, in the endpoint frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EndpointCoefficients {
    /// `x -> z` map.
    pub frame: DMatrix<f64>,
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub chol: DMatrix<f64>,
    pub r: DVector<f64>,
}

/// Per-time coefficient cache: `mu_t`, `Sigma_t`, its Cholesky factor, `r_t`, `gamma_t`.
///
/// `mu`, `sigma`, `chol` and `r` are in the original coordinates. `r` and
/// `gamma` are solved in the endpoint frame; use [`CoefficientBundle::solve`]
/// and [`CoefficientBundle::form`] rather than inverting `sigma` directly.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientBundle {
    pub t: f64,
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub chol: DMatrix<f64>,
    pub r: DVector<f64>,
    pub gamma: f64,
    pub endpoint: EndpointCoefficients,
}

impl CoefficientBundle {
    pub fn at(config: &AugmentedConfig, t: f64) -> Result<Self> {
        let n = config.n_vars();
        if !(0.0..1.0).contains(&t) {
            return Err(Error::OutOfRange {
                what: "t",
                value: t,
                range: "[0, 1)",
            });
        }
        let frame = endpoint_frame(n, t);
        let mu_z = endpoint_mean(n, t);
        // square-root factor of Sigma_z: Psi(t) exp(A) L0
        let l0 = guarded_cholesky(config.sigma0())?.l();
        let root_z = endpoint_transition(n, t) * endpoint_frame(n, 0.0) * l0;
        let sigma_z = symmetrize(&(&root_z * root_z.transpose()));
        let chol_z = guarded_factor(&root_z)?;

        let phi = controlled_transition(n, t);
        let sigma = symmetrize(&(&phi * config.sigma0() * phi.transpose()));
        let back = shift_transition(n, t - 1.0);
        let chol = cholesky_from_factor(&(&back * &chol_z));

        let mu = mean_vector(n, t);
        let (r, r_z, gamma) = if mu.iter().all(|v| *v == 0.0) {
            let (r, gamma) = reweight(&mu, config.sigma0())?;
            let r_z = frame
                .tr_solve_upper_triangular(&r)
                .expect("unit triangular");
            (r, r_z, gamma)
        } else {
            // gamma = |L^-1 mu|^2 is a sum of squares, free of cancellation
            let w = chol_z
                .solve_lower_triangular(&mu_z)
                .expect("guarded factor is invertible");
            let gamma = w.norm_squared();
            let r_z = chol_z
                .tr_solve_lower_triangular(&w)
                .expect("guarded factor is invertible")
                / gamma;
            (frame.tr_mul(&r_z), r_z, gamma)
        };
        Ok(Self {
            t,
            mu,
            sigma,
            chol,
            r,
            gamma,
            endpoint: EndpointCoefficients {
                frame,
                mu: mu_z,
                chol: chol_z,
                sigma: sigma_z,
                r: r_z,
            },
        })
    }

    pub fn n_vars(&self) -> usize {
        self.mu.len()
    }

    /// `Sigma^-1 v`.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        let e = &self.endpoint;
        let l = &e.chol;
        let rhs = &e.frame * v;
        let w = l
            .solve_lower_triangular(&rhs)
            .expect("guarded factor is invertible");
        let s_z = l
            .tr_solve_lower_triangular(&w)
            .expect("guarded factor is invertible");
        e.frame.tr_mul(&s_z)
    }

    /// `r^T Sigma r`, evaluated through the endpoint factor.
    pub fn r_sigma_r(&self) -> f64 {
        let e = &self.endpoint;
        e.chol.tr_mul(&e.r).norm_squared()
    }
}

/// Network input `y = sum_n r^(n) x^(n)`.
pub fn project_y(state: &AugmentedState, r: &DVector<f64>) -> Result<DVector<f64>> {
    if state.n_vars() != r.len() {
        return Err(Error::DimensionMismatch {
            expected: state.n_vars(),
            got: r.len(),
        });
    }
    Ok(state.vars.tr_mul(r))
}

/// Force `F = N! (x_hat - sum_n x^(n) (1-t)^n / n!) / (1-t)^N`.
///
/// Rejects `t >= 1 - guard` where the force becomes singular.
pub fn force_term(
    state: &AugmentedState,
    x_hat: &DVector<f64>,
    t: f64,
    n_vars: usize,
    guard: f64,
) -> Result<DVector<f64>> {
    if state.n_vars() != n_vars {
        return Err(Error::DimensionMismatch {
            expected: n_vars,
            got: state.n_vars(),
        });
    }
    if state.dim() != x_hat.len() {
        return Err(Error::DimensionMismatch {
            expected: state.dim(),
            got: x_hat.len(),
        });
    }
    if !(t < 1.0 - guard) {
        return Err(Error::OutOfRange {
            what: "t",
            value: t,
            range: "[0, 1 - delta)",
        });
    }
    let s = 1.0 - t;
    let taylor = DVector::from_fn(n_vars, |n, _| s.powi(n as i32) / factorial(n));
    let residual = x_hat - state.vars.tr_mul(&taylor);
    Ok(residual * (factorial(n_vars) / s.powi(n_vars as i32)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn mat(rows: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, data.len() / rows, data)
    }

    #[test]
    fn shift_transition_examples() {
        assert_eq!(shift_transition(1, 0.7), mat(1, &[1.0]));
        assert_eq!(shift_transition(2, 0.5), mat(2, &[1.0, 0.5, 0.0, 1.0]));
        assert_eq!(
            shift_transition(3, 1.0),
            mat(3, &[1.0, 1.0, 0.5, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0])
        );
    }

    #[test]
    fn hat_matrices_examples() {
        let (a, b) = hat_matrices(1, 0.0).unwrap();
        assert_eq!(a, mat(1, &[-1.0]));
        assert_eq!(b, DVector::from_vec(vec![1.0]));
        let (a, b) = hat_matrices(2, 0.0).unwrap();
        assert_eq!(a, mat(2, &[0.0, 1.0, -2.0, -2.0]));
        assert_eq!(b, DVector::from_vec(vec![0.0, 2.0]));
        let (_, b) = hat_matrices(1, 0.5).unwrap();
        assert_eq!(b, DVector::from_vec(vec![2.0]));
        assert!(hat_matrices(2, 1.0).is_err());
    }

    #[test]
    fn controlled_transition_examples() {
        assert_abs_diff_eq!(controlled_transition(1, 0.5)[(0, 0)], 0.5);
        for n in 1..=MAX_VARS {
            assert_eq!(controlled_transition(n, 0.0), DMatrix::identity(n, n));
        }
        // position row vanishes at t = 1: x^(0) lands on the target
        assert_eq!(
            controlled_transition(2, 1.0),
            mat(2, &[0.0, 0.0, -2.0, -1.0])
        );
        assert_eq!(
            controlled_transition(2, 0.5),
            mat(2, &[0.75, 0.25, -1.0, 0.0])
        );
    }

    #[test]
    fn mean_vector_examples() {
        assert_eq!(mean_vector(1, 0.3), DVector::from_vec(vec![0.3]));
        assert_eq!(mean_vector(2, 1.0), DVector::from_vec(vec![1.0, 2.0]));
        for n in 1..=4 {
            assert!(mean_vector(n, 0.0).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn covariance_examples() {
        let cfg = AugmentedConfig::new(1, 1.0, 1e-3).unwrap();
        for t in [0.1, 0.5, 0.9] {
            assert_abs_diff_eq!(
                covariance(&cfg, t).unwrap()[(0, 0)],
                (1.0 - t) * (1.0 - t),
                epsilon = 1e-15
            );
        }
        let cfg = AugmentedConfig::new(3, 10.0, 1e-3).unwrap();
        assert_eq!(covariance(&cfg, 0.0).unwrap(), *cfg.sigma0());

        let cfg = AugmentedConfig::new(2, 1.0, 1e-3).unwrap();
        let phi = mat(2, &[0.75, 0.25, -1.0, 0.0]);
        let expected = &phi * phi.transpose();
        assert_abs_diff_eq!(covariance(&cfg, 0.5).unwrap(), expected, epsilon = 1e-15);
        assert!(covariance(&cfg, 1.0).is_err());
    }

    #[test]
    fn reweight_examples() {
        let t: f64 = 0.5;
        let (r, gamma) =
            reweight(&DVector::from_vec(vec![t]), &mat(1, &[(1.0 - t).powi(2)])).unwrap();
        assert_abs_diff_eq!(r[0], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(gamma, 1.0, epsilon = 1e-14);

        for k in [0.1, 1.0, 10.0] {
            let (r, gamma) = reweight(&DVector::zeros(2), &mat(2, &[1.0, 0.0, 0.0, k])).unwrap();
            assert_eq!(gamma, 0.0);
            assert_abs_diff_eq!(r, DVector::from_vec(vec![0.0, 1.0]), epsilon = 1e-15);
        }
        assert!(reweight(
            &DVector::from_vec(vec![1.0, 1.0]),
            &mat(2, &[1.0, 2.0, 2.0, 1.0])
        )
        .is_err());
    }

    #[test]
    fn project_y_examples() {
        let v = DVector::from_vec(vec![0.4, -1.2]);
        let w = DVector::from_vec(vec![3.0, 5.0]);
        let s = AugmentedState::from_rows(&[v.clone(), w], 0.2);
        assert_eq!(
            project_y(&s, &DVector::from_vec(vec![1.0, 0.0])).unwrap(),
            v
        );
        let s = AugmentedState::from_rows(&[v.clone(), v.clone()], 0.2);
        assert_abs_diff_eq!(
            project_y(&s, &DVector::from_vec(vec![0.5, 0.5])).unwrap(),
            v,
            epsilon = 1e-15
        );
        let s = AugmentedState::from_rows(&[DVector::from_vec(vec![0.3])], 0.0);
        assert_abs_diff_eq!(
            project_y(&s, &DVector::from_vec(vec![2.0])).unwrap()[0],
            0.6
        );
        assert!(project_y(&s, &DVector::from_vec(vec![1.0, 0.0])).is_err());
    }

    #[test]
    fn force_term_examples() {
        let x0 = DVector::from_vec(vec![0.25, -0.5]);
        let s = AugmentedState::from_rows(std::slice::from_ref(&x0), 0.4);
        assert_eq!(
            force_term(&s, &x0, 0.4, 1, 1e-3).unwrap(),
            DVector::zeros(2)
        );

        let x_hat = DVector::from_vec(vec![1.0, 2.0]);
        let f = force_term(&s, &x_hat, 0.4, 1, 1e-3).unwrap();
        assert_abs_diff_eq!(f, (&x_hat - &x0) / 0.6, epsilon = 1e-15);

        let z = DVector::from_vec(vec![0.0]);
        let s = AugmentedState::from_rows(&[z.clone(), z], 0.0);
        let f = force_term(&s, &DVector::from_vec(vec![1.0]), 0.0, 2, 1e-3).unwrap();
        assert_eq!(f[0], 2.0);

        assert!(force_term(&s, &DVector::from_vec(vec![1.0]), 0.9995, 2, 1e-3).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(AugmentedConfig::new(0, 1.0, 1e-3).is_err());
        assert!(AugmentedConfig::new(9, 1.0, 1e-3).is_err());
        assert!(AugmentedConfig::new(2, 0.0, 1e-3).is_err());
        assert!(AugmentedConfig::new(2, 1.0, 0.0).is_err());
        assert!(AugmentedConfig::new(2, 1.0, 0.5).is_err());
        assert!(AugmentedConfig::with_sigma0(mat(2, &[1.0, 0.5, 0.4, 1.0]), 1e-3).is_err());
        assert!(AugmentedConfig::with_sigma0(mat(2, &[1.0, 0.5, 0.5, 1.0]), 1e-3).is_ok());
        let c = AugmentedConfig::new(3, 4.0, 1e-3).unwrap();
        assert_eq!(c.sigma0()[(2, 2)], 4.0);
        assert!(c.is_diagonal_prior());
    }

    #[test]
    fn bundle_identities_on_grid() {
        for n in 1..=4 {
            for k in [0.1, 1.0, 10.0] {
                let cfg = AugmentedConfig::new(n, k, 1e-3).unwrap();
                for i in 1..10 {
                    let b = CoefficientBundle::at(&cfg, i as f64 / 10.0).unwrap();
                    assert_abs_diff_eq!(b.r.dot(&b.mu), 1.0, epsilon = 1e-12);
                    let e = &b.endpoint;
                    let quad = b.r_sigma_r();
                    assert!(
                        (quad * b.gamma - 1.0).abs() < 1e-12,
                        "N={n} k={k} t={}: {quad}",
                        b.t
                    );
                    assert_abs_diff_eq!(e.r.dot(&e.mu), 1.0, epsilon = 1e-12);
                    assert_abs_diff_eq!(
                        &b.chol * b.chol.transpose(),
                        b.sigma.clone(),
                        epsilon = 1e-12 * b.sigma.amax()
                    );
                }
            }
        }
    }

    #[test]
    fn gamma_monotone_on_default_family() {
        for n in 1..=4 {
            for k in [0.1, 1.0, 10.0] {
                let cfg = AugmentedConfig::new(n, k, 1e-3).unwrap();
                let grid = 500;
                let mut prev = -1.0;
                for i in 0..=grid {
                    let t = cfg.t_final() * i as f64 / grid as f64;
                    let g = CoefficientBundle::at(&cfg, t).unwrap().gamma;
                    assert!(g > prev, "N={n} k={k} t={t}: {g} <= {prev}");
                    prev = g;
                }
            }
        }
    }

    #[test]
    fn endpoint_frame_conjugates_transition() {
        // M(t) Phi_hat(t, 0) = Psi(t) M(0)
        for n in 1..=6 {
            for t in [0.0, 0.2, 0.7, 0.99] {
                let lhs = endpoint_frame(n, t) * controlled_transition(n, t);
                let rhs = endpoint_transition(n, t) * endpoint_frame(n, 0.0);
                assert!(
                    (&lhs - &rhs).amax() < 1e-12 * rhs.amax().max(1.0),
                    "N={n} t={t}"
                );
                let mu = endpoint_frame(n, t) * mean_vector(n, t);
                assert!(
                    (mu - endpoint_mean(n, t)).amax() < 1e-12 * factorial(n),
                    "N={n} t={t}"
                );
            }
        }
    }

    #[test]
    fn bundle_agrees_with_direct_route_where_conditioned() {
        for n in 1..=3 {
            let cfg = AugmentedConfig::new(n, 1.0, 1e-3).unwrap();
            for t in [0.1, 0.3, 0.5] {
                let b = CoefficientBundle::at(&cfg, t).unwrap();
                let (r, gamma) = reweight(&b.mu, &b.sigma).unwrap();
                assert!((gamma / b.gamma - 1.0).abs() < 1e-10);
                assert!((r - &b.r).amax() < 1e-10 * b.r.amax());
                assert!((&b.chol * b.chol.transpose() - &b.sigma).amax() < 1e-13 * b.sigma.amax());
                let v = DVector::from_fn(n, |i, _| 1.0 + i as f64);
                assert!((&b.sigma * b.solve(&v) - &v).amax() < 1e-9);
            }
        }
    }

    #[test]
    fn bundle_valid_up_to_clamp_for_all_n() {
        for n in 1..=MAX_VARS {
            for k in [0.1, 1.0, 10.0] {
                let cfg = AugmentedConfig::new(n, k, DEFAULT_DELTA).unwrap();
                let b = CoefficientBundle::at(&cfg, cfg.t_final()).unwrap();
                assert!(b.gamma.is_finite() && b.gamma > 0.0);
                assert!((b.r.dot(&b.mu) - 1.0).abs() < 1e-9, "N={n} k={k}");
            }
        }
    }

    #[test]
    fn bundle_at_zero_uses_limit_direction() {
        let cfg = AugmentedConfig::new(3, 10.0, 1e-3).unwrap();
        let b = CoefficientBundle::at(&cfg, 0.0).unwrap();
        assert_eq!(b.gamma, 0.0);
        assert!((b.r - unit(3, 2)).amax() < 1e-15);
    }

    proptest! {
        #[test]
        fn shift_semigroup(n in 1usize..=8, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let lhs = shift_transition(n, a + b);
            let rhs = shift_transition(n, a) * shift_transition(n, b);
            prop_assert!((lhs - rhs).amax() < 1e-12);
        }

        #[test]
        fn reweight_normalizes(n in 1usize..=4, k in 0.1f64..10.0, t in 0.05f64..0.95) {
            let cfg = AugmentedConfig::new(n, k, 1e-3).unwrap();
            let b = CoefficientBundle::at(&cfg, t).unwrap();
            prop_assert!((b.r.dot(&b.mu) - 1.0).abs() < 1e-12);
        }
    }
}
