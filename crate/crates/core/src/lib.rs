//! Training-free augmented-dynamics (TADA) sampling for diffusion and flow models.
//!
//! A pretrained data-prediction denoiser is driven through an `N`-variable
//! chain-of-integrators system. The linear part of the dynamics is integrated
//! exactly with closed-form transition matrices; only the force term is
//! extrapolated with an Adams–Bashforth polynomial whose integral against the
//! transition kernel is evaluated in closed form.
//!
//! Module map:
//!
//! - [`dynamics`]: transition matrices, mean/covariance propagation, reweighting, force term.
//! - [`denoiser`]: the denoiser contract and analytic Bayes-optimal denoisers.
//! - [`sampler`]: schedules, history cache, exponential-integrator steps, the N=1 baseline.
//! - [`analysis`]: y-dynamics coefficients, whitened-noise decomposition, loss reparameterization.
//! - [`metrics`]: sliced Wasserstein, energy distance, diversity spread.
//! - [`verify`]: the registry of executable identity checks.

// Range guards are written `!(x > lo)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod denoiser;
pub mod dynamics;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod oracle;
pub mod rng;
pub mod sampler;
pub mod verify;

pub use error::{Error, Result};
