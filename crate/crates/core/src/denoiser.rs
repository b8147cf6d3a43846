//! Data-prediction denoisers.
//!
//! A denoiser maps a noisy input `y = x1 + sigma_bar * eps` to an estimate of
//! `x1`. The sampler conditions every call on `sigma_bar = 1 / sqrt(gamma)`,
//! the effective noise level of the reweighted input. The analytic
//! implementations here return the exact posterior mean `E[x1 | y]` and stand
//! in for pretrained networks.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::DVector;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::standard_normal;

/// A single denoiser call. `sigma_bar == f64::INFINITY` flags the
/// no-information limit (`gamma = 0`).
#[derive(Debug, Clone, Copy)]
pub struct DenoiseQuery<'a> {
    pub y: &'a DVector<f64>,
    pub sigma_bar: f64,
    /// Schedule time; informational only.
    pub t: f64,
}

/// Pure map `(y, noise level) -> x_hat`.
pub trait Denoiser: Sync {
    fn dim(&self) -> usize;
    fn denoise(&self, query: &DenoiseQuery<'_>) -> DVector<f64>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn denoise(&self, query: &DenoiseQuery<'_>) -> DVector<f64> {
        (**self).denoise(query)
    }
}

/// Mixture of axis-aligned Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    variances: Vec<DVector<f64>>,
}

impl GaussianMixture {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        variances: Vec<DVector<f64>>,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() || weights.len() != variances.len() {
            return Err(Error::InvalidConfig(
                "mixture needs matching, nonempty weights/means/variances".into(),
            ));
        }
        let d = means[0].len();
        if d == 0 || means.iter().chain(&variances).any(|v| v.len() != d) {
            return Err(Error::InvalidConfig(
                "mixture components must share one dimension".into(),
            ));
        }
        if weights.iter().any(|w| !(*w > 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12
        {
            return Err(Error::InvalidConfig(
                "mixture weights must be positive and sum to 1".into(),
            ));
        }
        if variances
            .iter()
            .flat_map(|v| v.iter())
            .any(|v| !(*v > 0.0 && v.is_finite()))
            || means.iter().flat_map(|m| m.iter()).any(|m| !m.is_finite())
        {
            return Err(Error::InvalidConfig(
                "mixture variances must be positive and finite".into(),
            ));
        }
        Ok(Self {
            weights,
            means,
            variances,
        })
    }

    /// `modes` equal-weight isotropic components evenly spaced on a circle in 2-D.
    pub fn ring(modes: usize, radius: f64, std: f64) -> Result<Self> {
        if modes == 0 {
            return Err(Error::InvalidConfig("ring needs at least one mode".into()));
        }
        if !(std > 0.0 && std.is_finite()) || !radius.is_finite() {
            return Err(Error::OutOfRange {
                what: "ring component std",
                value: std,
                range: "(0, inf)",
            });
        }
        let means = (0..modes)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / modes as f64;
                DVector::from_vec(vec![radius * a.cos(), radius * a.sin()])
            })
            .collect();
        let w = 1.0 / modes as f64;
        let mut weights = vec![w; modes];
        // absorb rounding so the weights sum to one
        let drift: f64 = 1.0 - weights.iter().sum::<f64>();
        weights[0] += drift;
        Self::new(
            weights,
            means,
            vec![DVector::from_element(2, std * std); modes],
        )
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn variances(&self) -> &[DVector<f64>] {
        &self.variances
    }

    pub fn mean(&self) -> DVector<f64> {
        self.weights
            .iter()
            .zip(&self.means)
            .fold(DVector::zeros(self.dim()), |acc, (w, m)| acc + m * *w)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut c = self.weights.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                c = i;
                break;
            }
        }
        DVector::from_fn(self.dim(), |j, _| {
            self.means[c][j] + self.variances[c][j].sqrt() * standard_normal(rng)
        })
    }

    /// Log-density of the mixture convolved with `N(0, sigma_bar^2 I)` at `y`,
    /// split per component (including the log weight).
    fn component_log_evidence(&self, y: &DVector<f64>, sigma_bar: f64) -> Vec<f64> {
        let s2 = sigma_bar * sigma_bar;
        self.weights
            .iter()
            .zip(self.means.iter().zip(&self.variances))
            .map(|(w, (m, v))| {
                let mut lp = w.ln();
                for j in 0..y.len() {
                    let var = v[j] + s2;
                    let diff = y[j] - m[j];
                    lp -= 0.5 * ((2.0 * PI * var).ln() + diff * diff / var);
                }
                lp
            })
            .collect()
    }
}

/// Exact `E[x1 | y]` for `y = x1 + sigma_bar * eps` under a Gaussian-mixture prior.
pub fn gmm_posterior_mean(gmm: &GaussianMixture, query: &DenoiseQuery<'_>) -> DVector<f64> {
    let sigma_bar = query.sigma_bar;
    if sigma_bar.is_infinite() {
        return gmm.mean();
    }
    if sigma_bar == 0.0 {
        return query.y.clone();
    }
    let y = query.y;
    let resp = softmax(&gmm.component_log_evidence(y, sigma_bar));
    let s2 = sigma_bar * sigma_bar;
    let mut out = DVector::zeros(y.len());
    for ((p, m), v) in resp.iter().zip(&gmm.means).zip(&gmm.variances) {
        for j in 0..y.len() {
            out[j] += p * (v[j] * y[j] + s2 * m[j]) / (v[j] + s2);
        }
    }
    out
}

impl Denoiser for GaussianMixture {
    fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn denoise(&self, query: &DenoiseQuery<'_>) -> DVector<f64> {
        gmm_posterior_mean(self, query)
    }
}

/// Empirical distribution over a finite point set.
#[derive(Debug, Clone, PartialEq)]
pub struct PointDataset {
    points: Vec<DVector<f64>>,
}

impl PointDataset {
    pub fn new(points: Vec<DVector<f64>>) -> Result<Self> {
        let Some(first) = points.first() else {
            return Err(Error::InvalidConfig("point set must be nonempty".into()));
        };
        let d = first.len();
        if d == 0
            || points
                .iter()
                .any(|p| p.len() != d || p.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::InvalidConfig(
                "points must be finite and share one nonzero dimension".into(),
            ));
        }
        Ok(Self { points })
    }

    /// `n` points drawn uniformly from the dark squares of a 4x4 checkerboard on `[-2, 2]^2`.
    pub fn checkerboard<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Self> {
        let points = (0..n)
            .map(|_| loop {
                let x: f64 = rng.random_range(-2.0..2.0);
                let y: f64 = rng.random_range(-2.0..2.0);
                let cell = (x + 2.0).floor() as i64 + (y + 2.0).floor() as i64;
                if cell % 2 == 0 {
                    break DVector::from_vec(vec![x, y]);
                }
            })
            .collect();
        Self::new(points)
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    pub fn mean(&self) -> DVector<f64> {
        self.points
            .iter()
            .fold(DVector::zeros(self.dim()), |a, p| a + p)
            / self.points.len() as f64
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        self.points[rng.random_range(0..self.points.len())].clone()
    }
}

/// `sum_i softmax(-|y - p_i|^2 / (2 sigma_bar^2)) p_i`.
pub fn pointset_posterior_mean(data: &PointDataset, query: &DenoiseQuery<'_>) -> DVector<f64> {
    let sigma_bar = query.sigma_bar;
    if sigma_bar.is_infinite() {
        return data.mean();
    }
    let y = query.y;
    if sigma_bar == 0.0 {
        return data
            .points
            .iter()
            .min_by(|a, b| (y - *a).norm_squared().total_cmp(&(y - *b).norm_squared()))
            .cloned()
            .unwrap_or_else(|| y.clone());
    }
    let inv = 1.0 / (2.0 * sigma_bar * sigma_bar);
    let logits: Vec<f64> = data
        .points
        .iter()
        .map(|p| -(y - p).norm_squared() * inv)
        .collect();
    softmax(&logits)
        .iter()
        .zip(&data.points)
        .fold(DVector::zeros(y.len()), |acc, (w, p)| acc + p * *w)
}

impl Denoiser for PointDataset {
    fn dim(&self) -> usize {
        self.points[0].len()
    }

    fn denoise(&self, query: &DenoiseQuery<'_>) -> DVector<f64> {
        pointset_posterior_mean(self, query)
    }
}

/// Log-sum-exp stabilized softmax.
fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Ignores its input and always predicts the same point.
#[derive(Debug, Clone)]
pub struct ConstantDenoiser(pub DVector<f64>);

impl Denoiser for ConstantDenoiser {
    fn dim(&self) -> usize {
        self.0.len()
    }

    fn denoise(&self, _query: &DenoiseQuery<'_>) -> DVector<f64> {
        self.0.clone()
    }
}

/// Wraps a denoiser and counts calls (NFE accounting).
#[derive(Debug)]
pub struct CountingDenoiser<D> {
    inner: D,
    calls: AtomicUsize,
}

impl<D: Denoiser> CountingDenoiser<D> {
    pub fn new(inner: D) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::Relaxed);
    }
}

impl<D: Denoiser> Denoiser for CountingDenoiser<D> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn denoise(&self, query: &DenoiseQuery<'_>) -> DVector<f64> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.denoise(query)
    }
}

/// Effective noise level `1 / sqrt(gamma)`; infinite at `gamma = 0`.
pub fn snr_to_sigma(gamma: f64) -> Result<f64> {
    if !(gamma >= 0.0) {
        return Err(Error::OutOfRange {
            what: "gamma",
            value: gamma,
            range: "[0, inf)",
        });
    }
    if gamma == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(1.0 / gamma.sqrt())
}

/// Variance-preserving noise curve, `t = 0` clean, `alpha_bar(t)` the signal fraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VpCurve {
    /// `alpha_bar(t) = exp(-beta_min t - (beta_max - beta_min) t^2 / 2)`.
    Linear { beta_min: f64, beta_max: f64 },
    /// `alpha_bar(t) = f(t) / f(0)`, `f(t) = cos^2(pi/2 (t + s) / (1 + s))`.
    Cosine { s: f64 },
}

impl VpCurve {
    pub fn snr(&self, t: f64) -> f64 {
        let alpha_bar = match *self {
            VpCurve::Linear { beta_min, beta_max } => {
                (-beta_min * t - 0.5 * (beta_max - beta_min) * t * t).exp()
            }
            VpCurve::Cosine { s } => {
                let f = |t: f64| (0.5 * PI * (t + s) / (1.0 + s)).cos().powi(2);
                f(t) / f(0.0)
            }
        };
        alpha_bar / (1.0 - alpha_bar)
    }

    /// Time at which the curve's SNR equals `gamma`.
    pub fn time_for_snr(&self, gamma: f64) -> f64 {
        let alpha_bar = gamma / (1.0 + gamma);
        match *self {
            VpCurve::Linear { beta_min, beta_max } => {
                let l = (1.0 + 1.0 / gamma).ln();
                let db = beta_max - beta_min;
                if db.abs() < 1e-300 {
                    l / beta_min
                } else {
                    (-beta_min + (beta_min * beta_min + 2.0 * db * l).sqrt()) / db
                }
            }
            VpCurve::Cosine { s } => {
                let f0 = (0.5 * PI * s / (1.0 + s)).cos().powi(2);
                (1.0 + s) * (2.0 / PI) * (alpha_bar * f0).sqrt().min(1.0).acos() - s
            }
        }
    }
}

/// Conditioning convention of a pretrained model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SnrConvention {
    /// Flow-matching time `t'` with `t' / (1 - t') = sqrt(gamma)`.
    FlowMatching,
    /// Variance-preserving time along the supplied curve.
    VariancePreserving(VpCurve),
    /// EDM noise level `sigma = 1 / sqrt(gamma)`.
    EdmSigma,
}

impl SnrConvention {
    /// Resolves a convention name (`fm`, `vp`, `edm-sigma`). `vp` requires a curve.
    pub fn parse(name: &str, vp_curve: Option<VpCurve>) -> Result<Self> {
        match name {
            "fm" => Ok(Self::FlowMatching),
            "edm-sigma" => Ok(Self::EdmSigma),
            "vp" => vp_curve
                .map(Self::VariancePreserving)
                .ok_or_else(|| Error::InvalidConfig("vp convention requires a noise curve".into())),
            other => Err(Error::InvalidConfig(format!(
                "unknown SNR convention `{other}`"
            ))),
        }
    }
}

pub fn snr_to_model_time(gamma: f64, convention: &SnrConvention) -> Result<f64> {
    let sigma = snr_to_sigma(gamma)?;
    Ok(match convention {
        SnrConvention::FlowMatching => {
            if gamma.is_infinite() {
                1.0
            } else {
                let s = gamma.sqrt();
                s / (1.0 + s)
            }
        }
        SnrConvention::VariancePreserving(curve) => curve.time_for_snr(gamma),
        SnrConvention::EdmSigma => sigma,
    })
}
