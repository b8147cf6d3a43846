//! Executable forms of the identities behind the sampler: the dynamics of the
//! reweighted input `y = r^T x`, its whitened-noise decomposition, the loss
//! reparameterization of the augmented model, and the equivalence of the
//! full-state and reweighted posteriors.
//!
//! Conventions: `e_t = Sigma^-1 b_hat / gamma`, `g = L^T r` (so `|g|^2 =
//! r^T Sigma r = 1 / gamma`), `L` the Cholesky factor of `Sigma_t`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::denoiser::{gmm_posterior_mean, snr_to_sigma, DenoiseQuery, Denoiser, GaussianMixture};
use crate::dynamics::{hat_matrices, AugmentedConfig, AugmentedState, CoefficientBundle};
use crate::error::{Error, Result};
use crate::linalg::{guarded_cholesky, unit};
use crate::oracle::trapezoid;
use crate::rng::{standard_normal, stream};
use crate::sampler::prior_from_noise;

fn check_open_interval(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::OutOfRange {
            what: "t",
            value: t,
            range: "(0, 1)",
        });
    }
    Ok(())
}

/// `b_hat_t`, the input vector of the closed loop.
fn b_hat(n_vars: usize, t: f64) -> Result<DVector<f64>> {
    Ok(hat_matrices(n_vars, t)?.1)
}

/// `d gamma / dt = 2 b_hat^T Sigma^-1 mu`.
pub fn gamma_dot(config: &AugmentedConfig, t: f64) -> Result<f64> {
    check_open_interval(t)?;
    let bundle = CoefficientBundle::at(config, t)?;
    gamma_dot_from(&bundle)
}

fn gamma_dot_from(bundle: &CoefficientBundle) -> Result<f64> {
    let b = b_hat(bundle.n_vars(), bundle.t)?;
    // Sigma^-1 mu = gamma r
    Ok(2.0 * bundle.gamma * b.dot(&bundle.r))
}

/// `y' = (b_hat^T Sigma^-1 x + x1 mu^T Sigma^-1 b_hat) / gamma - y gamma' / gamma`
/// along the conditional flow `x' = A_hat x + b_hat x1`.
pub fn y_dot_exact(
    state: &AugmentedState,
    x1: &DVector<f64>,
    config: &AugmentedConfig,
) -> Result<DVector<f64>> {
    let t = state.t;
    check_open_interval(t)?;
    if x1.len() != state.dim() {
        return Err(Error::DimensionMismatch {
            expected: state.dim(),
            got: x1.len(),
        });
    }
    y_dot_with(&CoefficientBundle::at(config, t)?, state, x1)
}

/// [`y_dot_exact`] with the coefficients at `state.t` supplied.
pub fn y_dot_with(
    bundle: &CoefficientBundle,
    state: &AugmentedState,
    x1: &DVector<f64>,
) -> Result<DVector<f64>> {
    if bundle.t != state.t || bundle.n_vars() != state.n_vars() || x1.len() != state.dim() {
        return Err(Error::Precondition(
            "coefficients, state and x1 must agree in time and shape".into(),
        ));
    }
    let b = b_hat(bundle.n_vars(), bundle.t)?;
    let gamma = bundle.gamma;
    let sinv_b = bundle.solve(&b);
    let y = state.vars.tr_mul(&bundle.r);
    // mu^T Sigma^-1 b_hat = gamma r^T b_hat
    let x1_coef = b.dot(&bundle.r);
    Ok(state.vars.tr_mul(&sinv_b) / gamma + x1 * x1_coef - y * (gamma_dot_from(bundle)? / gamma))
}

/// Coefficients of `y' = alpha y + beta x1 + w eps_perp`, `eps_perp ~ N(0, perp_cov)`.
#[derive(Debug, Clone, PartialEq)]
pub struct YDynCoefficients {
    pub alpha: f64,
    pub beta: f64,
    pub w: DVector<f64>,
    pub e: DVector<f64>,
    pub perp_cov: DMatrix<f64>,
}

/// Evaluates `alpha = e^T Sigma r / (r^T Sigma r) - gamma'/gamma`,
/// `beta = mu^T Sigma^-1 b_hat / gamma + e^T [I - Sigma r r^T / (r^T Sigma r)] mu`,
/// `w = e^T L`, `perp_cov = I - g g^T / |g|^2`.
///
/// `Sigma e = b_hat / gamma` gives `e^T Sigma r = b_hat^T r / gamma` without a
/// product against the ill-conditioned `Sigma`.
pub fn y_dyn_coefficients(config: &AugmentedConfig, t: f64) -> Result<YDynCoefficients> {
    check_open_interval(t)?;
    let bundle = CoefficientBundle::at(config, t)?;
    let n = config.n_vars();
    let b = b_hat(n, t)?;
    let gamma = bundle.gamma;
    let r = &bundle.r;
    let e = bundle.solve(&b) / gamma;
    let r_sigma_r = bundle.r_sigma_r();
    let e_sigma_r = b.dot(r) / gamma;
    let gamma_dot = gamma_dot_from(&bundle)?;
    let alpha = e_sigma_r / r_sigma_r - gamma_dot / gamma;
    let bracket = e.dot(&bundle.mu) - e_sigma_r * r.dot(&bundle.mu) / r_sigma_r;
    let beta = b.dot(r) + bracket;
    let w = bundle.chol.tr_mul(&e);
    let g = bundle.chol.tr_mul(r);
    let perp_cov = DMatrix::identity(n, n) - &g * g.transpose() / g.norm_squared();
    Ok(YDynCoefficients {
        alpha,
        beta,
        w,
        e,
        perp_cov,
    })
}

/// Split of `z = e^T x` into the part determined by `(x1, r^T x)` and the
/// residual carried by the noise orthogonal to `g = L^T r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WhitenedSplit {
    /// `e^T [I - Sigma r r^T / (r^T Sigma r)] mu x1 + (e^T Sigma r / r^T Sigma r) r^T x`.
    pub deterministic: f64,
    /// `e^T L eps_perp` with `eps = L^-1 (x - mu x1)`.
    pub residual: f64,
    /// `e^T x`.
    pub actual: f64,
}

impl WhitenedSplit {
    pub fn z_pred(&self) -> f64 {
        self.deterministic + self.residual
    }
}

/// Decomposes `e^T x` for one sample `x` of `N(mu x1, Sigma)`.
pub fn whitened_decomposition(
    mu: &DVector<f64>,
    sigma: &DMatrix<f64>,
    r: &DVector<f64>,
    e: &DVector<f64>,
    x1: f64,
    x: &DVector<f64>,
) -> Result<WhitenedSplit> {
    let l = guarded_cholesky(sigma)?.l();
    let sigma_r = sigma * r;
    let r_sigma_r = r.dot(&sigma_r);
    let coupling = e.dot(&sigma_r) / r_sigma_r;
    let deterministic = (e.dot(mu) - coupling * r.dot(mu)) * x1 + coupling * r.dot(x);
    let eps = l
        .solve_lower_triangular(&(x - mu * x1))
        .ok_or(Error::Singular("Cholesky factor"))?;
    let g = l.tr_mul(r);
    let eps_perp = &eps - &g * (g.dot(&eps) / g.norm_squared());
    Ok(WhitenedSplit {
        deterministic,
        residual: l.tr_mul(e).dot(&eps_perp),
        actual: e.dot(x),
    })
}

/// `a = L^-T e_{N-1}`, `b = a^T mu`: the last whitened noise component of
/// `x = mu x1 + L eps` is `eps^(N-1) = a^T x - b x1`.
pub fn mdm_loss_reparam(l: &DMatrix<f64>, mu: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let n = mu.len();
    if l.nrows() != n || l.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: l.nrows(),
        });
    }
    if (0..n).any(|i| !(l[(i, i)].abs() > 0.0) || !l[(i, i)].is_finite()) {
        return Err(Error::Singular("lower-triangular factor"));
    }
    let a = l
        .tr_solve_lower_triangular(&unit(n, n - 1))
        .ok_or(Error::Singular("lower-triangular factor"))?;
    let b = a.dot(mu);
    Ok((a, b))
}

/// Two-variable regression target for `x1`:
/// `x1 = eps * eps_pred + x0 * x^(0) + x1 * x^(1)` with
/// `x1 = (Lvv eps - x^(1) + (Lxv/Lxx) x^(0)) / ((Lxv/Lxx) mu^(0) - mu^(1))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct N2LossCoeffs {
    pub eps: f64,
    pub x0: f64,
    pub x1: f64,
    pub denominator: f64,
}

pub fn n2_loss_coeffs(lxx: f64, lxv: f64, lvv: f64, mu0: f64, mu1: f64) -> Result<N2LossCoeffs> {
    if lxx == 0.0 || lvv == 0.0 {
        return Err(Error::Singular("diagonal of the 2x2 factor"));
    }
    let rho = lxv / lxx;
    let denominator = rho * mu0 - mu1;
    if denominator.abs() <= 1e-14 * (rho * mu0).abs().max(mu1.abs()) {
        return Err(Error::Singular("x1 coefficient (Lxv/Lxx) mu0 - mu1"));
    }
    Ok(N2LossCoeffs {
        eps: lvv / denominator,
        x0: rho / denominator,
        x1: -1.0 / denominator,
        denominator,
    })
}

fn check_posterior_inputs(gmm: &GaussianMixture, config: &AugmentedConfig, t: f64) -> Result<()> {
    check_open_interval(t)?;
    if gmm.dim() != 1 {
        return Err(Error::Precondition("posterior check needs 1-D data".into()));
    }
    if config.n_vars() > 3 {
        return Err(Error::Precondition(
            "posterior check supports N <= 3".into(),
        ));
    }
    Ok(())
}

fn log_normal_pdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let chol = guarded_cholesky(cov)?;
    let l = chol.l();
    let z = l
        .solve_lower_triangular(&(x - mean))
        .ok_or(Error::Singular("Cholesky factor"))?;
    let logdet: f64 = (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0;
    Ok(-0.5 * (z.norm_squared() + logdet + x.len() as f64 * (2.0 * std::f64::consts::PI).ln()))
}

/// `E[x1 | x_t]` by per-component Gaussian conditioning on the full `N`-vector
/// (the joint of `(x1, x_t)` is Gaussian within each mixture component).
pub fn full_state_posterior_mean(
    gmm: &GaussianMixture,
    bundle: &CoefficientBundle,
    x: &DVector<f64>,
) -> Result<f64> {
    let mu = &bundle.mu;
    let mut logw = Vec::with_capacity(gmm.weights().len());
    let mut means = Vec::with_capacity(gmm.weights().len());
    for ((w, m), v) in gmm.weights().iter().zip(gmm.means()).zip(gmm.variances()) {
        let (m, v) = (m[0], v[0]);
        let cov = mu * mu.transpose() * v + &bundle.sigma;
        let chol = guarded_cholesky(&cov)?;
        let gain = chol.solve(&(x - mu * m));
        means.push(m + v * mu.dot(&gain));
        logw.push(w.ln() + log_normal_pdf(x, &(mu * m), &cov)?);
    }
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.iter().zip(&means).map(|(w, m)| w * m).sum::<f64>() / total)
}

/// `E[x1 | x_t]` by trapezoid integration of `x1 p(x1) N(x_t; mu x1, Sigma)`
/// over a wide grid in `x1`.
pub fn posterior_mean_quadrature(
    gmm: &GaussianMixture,
    bundle: &CoefficientBundle,
    x: &DVector<f64>,
    intervals: usize,
) -> Result<f64> {
    let chol = guarded_cholesky(&bundle.sigma)?;
    let lo = gmm
        .means()
        .iter()
        .zip(gmm.variances())
        .map(|(m, v)| m[0] - 12.0 * v[0].sqrt())
        .fold(f64::INFINITY, f64::min);
    let hi = gmm
        .means()
        .iter()
        .zip(gmm.variances())
        .map(|(m, v)| m[0] + 12.0 * v[0].sqrt())
        .fold(f64::NEG_INFINITY, f64::max);
    let log_joint = |x1: f64| -> f64 {
        let prior: f64 = gmm
            .weights()
            .iter()
            .zip(gmm.means())
            .zip(gmm.variances())
            .map(|((w, m), v)| {
                w * (-(x1 - m[0]).powi(2) / (2.0 * v[0])).exp()
                    / (2.0 * std::f64::consts::PI * v[0]).sqrt()
            })
            .sum();
        let d = x - &bundle.mu * x1;
        prior.ln() - 0.5 * d.dot(&chol.solve(&d))
    };
    let h = (hi - lo) / intervals as f64;
    let peak = (0..=intervals)
        .map(|i| log_joint(lo + i as f64 * h))
        .fold(f64::NEG_INFINITY, f64::max);
    let num = trapezoid(|x1| x1 * (log_joint(x1) - peak).exp(), lo, hi, intervals);
    let den = trapezoid(|x1| (log_joint(x1) - peak).exp(), lo, hi, intervals);
    Ok(num / den)
}

/// Draws `x_t = mu x1 + L eps` with `x1` from the mixture and `eps` standard normal.
pub fn draw_state<R: Rng + ?Sized>(
    gmm: &GaussianMixture,
    bundle: &CoefficientBundle,
    rng: &mut R,
) -> (f64, DVector<f64>) {
    let x1 = gmm.sample(rng)[0];
    let n = bundle.n_vars();
    let eps = DVector::from_fn(n, |_, _| standard_normal(rng));
    (x1, &bundle.mu * x1 + &bundle.chol * eps)
}

/// Largest `|E[x1 | x_t] - E[x1 | y_t]|` over `trials` draws of `x_t`, where
/// the left side conditions on the full state and the right side is the
/// scalar mixture posterior of `y = r^T x_t` at noise level `1/sqrt(gamma)`.
pub fn posterior_equivalence_check(
    gmm: &GaussianMixture,
    config: &AugmentedConfig,
    t: f64,
    trials: usize,
    seed: u64,
) -> Result<f64> {
    check_posterior_inputs(gmm, config, t)?;
    let bundle = CoefficientBundle::at(config, t)?;
    let sigma_bar = snr_to_sigma(bundle.gamma)?;
    let mut rng = stream(seed, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let (_, x) = draw_state(gmm, &bundle, &mut rng);
        let full = full_state_posterior_mean(gmm, &bundle, &x)?;
        let y = DVector::from_element(1, bundle.r.dot(&x));
        let reduced = gmm_posterior_mean(
            gmm,
            &DenoiseQuery {
                y: &y,
                sigma_bar,
                t,
            },
        )[0];
        worst = worst.max((full - reduced).abs());
    }
    Ok(worst)
}

/// Draws a prior-consistent state `x_t` of scalar data conditioned on given
/// `(y, x1)` (Gaussian conditioning of `eps` on `g^T eps = y - x1`).
pub fn draw_conditional_state<R: Rng + ?Sized>(
    bundle: &CoefficientBundle,
    y: f64,
    x1: f64,
    rng: &mut R,
) -> DVector<f64> {
    let n = bundle.n_vars();
    let g = bundle.chol.tr_mul(&bundle.r);
    let g2 = g.norm_squared();
    let xi = DVector::from_fn(n, |_, _| standard_normal(rng));
    let eps = &xi + &g * ((y - x1 - g.dot(&xi)) / g2);
    &bundle.mu * x1 + &bundle.chol * eps
}

/// Prior state at `t = 0` for scalar data drawn from `rng`.
pub fn draw_prior_scalar<R: Rng + ?Sized>(
    config: &AugmentedConfig,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let n = config.n_vars();
    let noise = DMatrix::from_fn(n, 1, |_, _| standard_normal(rng));
    Ok(prior_from_noise(config, &noise)?
        .vars
        .column(0)
        .into_owned())
}
