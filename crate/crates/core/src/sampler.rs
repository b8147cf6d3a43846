//! Schedules, prior sampling and the multistep exponential integrator.
//!
//! One step from `t_i` to `t_{i+1}` is
//!
//! ```text
//! x_{i+1} = exp(dt A) x_i + int_{t_i}^{t_{i+1}} exp((t_{i+1} - tau) A) b P(tau) dtau
//! ```
//!
//! where `P` is the Adams–Bashforth polynomial through the cached forces.
//! The kernel `exp((t_{i+1} - tau) A) b` has polynomial entries, so the
//! integral is evaluated in closed form.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::denoiser::{snr_to_sigma, DenoiseQuery, Denoiser};
use crate::dynamics::{
    force_term, project_y, shift_transition, AugmentedConfig, AugmentedState, CoefficientBundle,
};
use crate::error::{Error, Result};
use crate::linalg::{factorial, guarded_cholesky};
use crate::rng::{sample_stream, standard_normal};

pub const MAX_ORDER: usize = 3;
pub const DEFAULT_ORDER: usize = 3;
pub const DEFAULT_POLY_EXPONENT: f64 = 2.0;
pub const DEFAULT_T_FLOOR: f64 = 1e-3;

/// Time discretization scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheme {
    /// `t_i = i (1 - delta) / T`.
    Uniform,
    /// `t_i = (1 - delta) (i / T)^p`.
    Polynomial { p: f64 },
    /// `log gamma(t_i)` uniform on `[t_floor, 1 - delta]`, preceded by the plain step `[0, t_floor]`.
    LogSnr { t_floor: f64 },
}

impl Scheme {
    /// Parses `uniform-t`, `polynomial-t` or `logsnr-uniform`; missing
    /// parameters take their defaults.
    pub fn parse(name: &str, p: Option<f64>, t_floor: Option<f64>) -> Result<Self> {
        match name {
            "uniform-t" => Ok(Self::Uniform),
            "polynomial-t" => Ok(Self::Polynomial {
                p: p.unwrap_or(DEFAULT_POLY_EXPONENT),
            }),
            "logsnr-uniform" => Ok(Self::LogSnr {
                t_floor: t_floor.unwrap_or(DEFAULT_T_FLOOR),
            }),
            other => Err(Error::InvalidConfig(format!(
                "unknown schedule scheme '{other}' (expected uniform-t, polynomial-t or logsnr-uniform)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Uniform => "uniform-t",
            Self::Polynomial { .. } => "polynomial-t",
            Self::LogSnr { .. } => "logsnr-uniform",
        }
    }
}

/// Strictly increasing times `0 = t_0 < ... < t_T = 1 - delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    times: Vec<f64>,
    scheme: Scheme,
}

impl Schedule {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn t_final(&self) -> f64 {
        self.times[self.times.len() - 1]
    }
}

/// Builds a schedule with `steps` intervals ending at `1 - delta`.
///
/// `config` supplies `gamma(t)` for the log-SNR scheme and is ignored by the
/// others.
pub fn make_schedule(
    scheme: Scheme,
    steps: usize,
    order: usize,
    delta: f64,
    config: &AugmentedConfig,
) -> Result<Schedule> {
    if order == 0 {
        return Err(Error::InvalidConfig(
            "solver order must be at least 1".into(),
        ));
    }
    if steps < order.max(1) {
        return Err(Error::InvalidConfig(format!(
            "schedule needs at least as many steps as the solver order ({steps} < {order})"
        )));
    }
    if !(0.0..0.5).contains(&delta) {
        return Err(Error::OutOfRange {
            what: "delta",
            value: delta,
            range: "[0, 0.5)",
        });
    }
    let end = 1.0 - delta;
    let grid = |p: f64| -> Vec<f64> {
        (0..=steps)
            .map(|i| {
                if i == steps {
                    end
                } else {
                    end * (i as f64 / steps as f64).powf(p)
                }
            })
            .collect()
    };
    let times = match scheme {
        Scheme::Uniform => grid(1.0),
        Scheme::Polynomial { p } => {
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::OutOfRange {
                    what: "p",
                    value: p,
                    range: "(0, inf)",
                });
            }
            grid(p)
        }
        Scheme::LogSnr { t_floor } => logsnr_times(steps, end, t_floor, config)?,
    };
    if times.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidConfig(
            "schedule times are not strictly increasing".into(),
        ));
    }
    Ok(Schedule { times, scheme })
}

fn logsnr_times(
    steps: usize,
    end: f64,
    t_floor: f64,
    config: &AugmentedConfig,
) -> Result<Vec<f64>> {
    if end >= 1.0 {
        return Err(Error::InvalidConfig(
            "logsnr-uniform needs delta > 0 (gamma is infinite at t = 1)".into(),
        ));
    }
    if !(t_floor > 0.0 && t_floor < end) {
        return Err(Error::OutOfRange {
            what: "t_floor",
            value: t_floor,
            range: "(0, 1 - delta)",
        });
    }
    if steps == 1 {
        return Ok(vec![0.0, end]);
    }
    let log_gamma = |t: f64| -> Result<f64> { Ok(CoefficientBundle::at(config, t)?.gamma.ln()) };
    let lo = log_gamma(t_floor)?;
    let hi = log_gamma(end)?;
    let mut times = vec![0.0, t_floor];
    for i in 2..steps {
        let target = lo + (hi - lo) * (i - 1) as f64 / (steps - 1) as f64;
        let (mut a, mut b) = (t_floor, end);
        while b - a > 1e-15 {
            let m = 0.5 * (a + b);
            if m <= a || m >= b {
                break;
            }
            if log_gamma(m)? < target {
                a = m;
            } else {
                b = m;
            }
        }
        times.push(0.5 * (a + b));
    }
    times.push(end);
    Ok(times)
}

/// Ring buffer of the most recent `(t, F)` pairs, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryCache {
    entries: VecDeque<(f64, DVector<f64>)>,
    capacity: usize,
}

impl HistoryCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            entries: VecDeque::with_capacity(capacity),
            capacity: capacity.max(1),
        }
    }

    pub fn push(&mut self, t: f64, force: DVector<f64>) -> Result<()> {
        if let Some(&(last, _)) = self.entries.back() {
            if !(t > last) {
                return Err(Error::NonIncreasingTimes {
                    previous: last,
                    next: t,
                });
            }
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((t, force));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> impl Iterator<Item = &(f64, DVector<f64>)> {
        self.entries.iter()
    }
}

/// Monomial coefficients (in `u`) of the Lagrange basis polynomials through `nodes`.
fn lagrange_monomials(nodes: &[f64]) -> Vec<Vec<f64>> {
    nodes
        .iter()
        .enumerate()
        .map(|(j, &uj)| {
            let mut poly = vec![1.0];
            for (i, &ui) in nodes.iter().enumerate() {
                if i == j {
                    continue;
                }
                let scale = 1.0 / (uj - ui);
                let mut next = vec![0.0; poly.len() + 1];
                for (p, c) in poly.iter().enumerate() {
                    next[p + 1] += c * scale;
                    next[p] -= c * ui * scale;
                }
                poly = next;
            }
            poly
        })
        .collect()
}

/// `int_{t_from}^{t_to} exp((t_to - tau) A) b P(tau) dtau`, one row per variable.
///
/// Row `k` integrates `(t_to - tau)^m / m! * P(tau)` with `m = N - 1 - k`;
/// with `u = tau - t_from` and `dt = t_to - t_from`, each monomial gives
/// `int_0^dt (dt - u)^m / m! u^p du = dt^(m+p+1) p! / (m+p+1)!`.
pub fn psi_integral(
    cache: &HistoryCache,
    t_from: f64,
    t_to: f64,
    n_vars: usize,
) -> Result<DMatrix<f64>> {
    let (t_last, f_last) = cache.entries.back().ok_or(Error::EmptyCache)?;
    if !(t_from < t_to) {
        return Err(Error::NonIncreasingTimes {
            previous: t_from,
            next: t_to,
        });
    }
    if *t_last > t_from {
        return Err(Error::Precondition(format!(
            "cached time {t_last} lies after the step start {t_from}"
        )));
    }
    let dt = t_to - t_from;
    let nodes: Vec<f64> = cache.entries().map(|(t, _)| t - t_from).collect();
    let basis = lagrange_monomials(&nodes);
    let mut out = DMatrix::zeros(n_vars, f_last.len());
    for ((_, force), coeffs) in cache.entries().zip(&basis) {
        for k in 0..n_vars {
            let m = n_vars - 1 - k;
            let weight: f64 = coeffs
                .iter()
                .enumerate()
                .map(|(p, c)| c * dt.powi((m + p + 1) as i32) * factorial(p) / factorial(m + p + 1))
                .sum();
            let mut row = out.row_mut(k);
            row += force.transpose() * weight;
        }
    }
    Ok(out)
}

/// One recorded point of a trajectory: denoiser input and output at `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub y: DVector<f64>,
    pub x_hat: DVector<f64>,
}

fn finite_or(v: &DVector<f64>, stage: &'static str, t: f64) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { stage, t })
    }
}

fn predict<D: Denoiser + ?Sized>(
    state: &AugmentedState,
    denoiser: &D,
    bundle: &CoefficientBundle,
) -> Result<TrajectoryPoint> {
    let t = state.t;
    let y = project_y(state, &bundle.r)?;
    finite_or(&y, "projection", t)?;
    let sigma_bar = snr_to_sigma(bundle.gamma)?;
    let x_hat = denoiser.denoise(&DenoiseQuery {
        y: &y,
        sigma_bar,
        t,
    });
    if x_hat.len() != state.dim() {
        return Err(Error::DimensionMismatch {
            expected: state.dim(),
            got: x_hat.len(),
        });
    }
    finite_or(&x_hat, "denoiser", t)?;
    Ok(TrajectoryPoint { t, y, x_hat })
}

fn step_inner<D: Denoiser + ?Sized>(
    state: &AugmentedState,
    denoiser: &D,
    bundle: &CoefficientBundle,
    t_next: f64,
    cache: &mut HistoryCache,
) -> Result<(AugmentedState, TrajectoryPoint)> {
    let t = state.t;
    if !(t < t_next && t_next < 1.0) {
        return Err(Error::Precondition(format!(
            "step must satisfy t < t_next < 1 (t = {t}, t_next = {t_next})"
        )));
    }
    if bundle.t != t || bundle.n_vars() != state.n_vars() {
        return Err(Error::Precondition(format!(
            "coefficient bundle at t = {} (N = {}) does not match the state at t = {t} (N = {})",
            bundle.t,
            bundle.n_vars(),
            state.n_vars()
        )));
    }
    let n = state.n_vars();
    let point = predict(state, denoiser, bundle)?;
    let force = force_term(state, &point.x_hat, t, n, 0.0)?;
    finite_or(&force, "force", t)?;
    cache.push(t, force)?;
    let vars = shift_transition(n, t_next - t) * &state.vars + psi_integral(cache, t, t_next, n)?;
    if vars.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            stage: "integrator",
            t,
        });
    }
    Ok((AugmentedState::new(vars, t_next), point))
}

/// One exponential-integrator step from `state.t` to `t_next`. The new force
/// is appended to `cache`, whose capacity is the solver order.
pub fn tada_step<D: Denoiser + ?Sized>(
    state: &AugmentedState,
    denoiser: &D,
    bundle: &CoefficientBundle,
    t_next: f64,
    cache: &mut HistoryCache,
) -> Result<AugmentedState> {
    step_inner(state, denoiser, bundle, t_next, cache).map(|(s, _)| s)
}

/// Standard-normal noise, one row per variable, drawn variable by variable.
pub fn draw_noise<R: Rng + ?Sized>(n_vars: usize, d: usize, rng: &mut R) -> DMatrix<f64> {
    let draws: Vec<f64> = (0..n_vars * d).map(|_| standard_normal(rng)).collect();
    DMatrix::from_row_slice(n_vars, d, &draws)
}

/// Prior state `(L0 (x) I_d) eps` at `t = 0`.
pub fn prior_from_noise(config: &AugmentedConfig, noise: &DMatrix<f64>) -> Result<AugmentedState> {
    if noise.nrows() != config.n_vars() {
        return Err(Error::DimensionMismatch {
            expected: config.n_vars(),
            got: noise.nrows(),
        });
    }
    let l0 = guarded_cholesky(config.sigma0())?.l();
    Ok(AugmentedState::new(l0 * noise, 0.0))
}

pub fn sample_prior<R: Rng + ?Sized>(
    config: &AugmentedConfig,
    d: usize,
    rng: &mut R,
) -> Result<AugmentedState> {
    prior_from_noise(config, &draw_noise(config.n_vars(), d, rng))
}

/// Everything that defines a batch run.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerRun {
    pub config: AugmentedConfig,
    pub schedule: Schedule,
    pub order: usize,
    pub seed: u64,
    pub batch: usize,
}

fn check_order(order: usize, schedule: &Schedule) -> Result<()> {
    if !(1..=MAX_ORDER).contains(&order) {
        return Err(Error::InvalidConfig(format!(
            "solver order must be in 1..={MAX_ORDER}, got {order}"
        )));
    }
    if schedule.steps() < order {
        return Err(Error::InvalidConfig(format!(
            "schedule has {} steps, fewer than the solver order {order}",
            schedule.steps()
        )));
    }
    Ok(())
}

/// A sampler with all per-time coefficients precomputed.
#[derive(Debug, Clone)]
pub struct TadaSampler {
    config: AugmentedConfig,
    schedule: Schedule,
    order: usize,
    bundles: Vec<CoefficientBundle>,
}

impl TadaSampler {
    pub fn new(config: AugmentedConfig, schedule: Schedule, order: usize) -> Result<Self> {
        check_order(order, &schedule)?;
        if schedule.t_final() > config.t_final() + 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "schedule ends at {} beyond the clamp 1 - delta = {}",
                schedule.t_final(),
                config.t_final()
            )));
        }
        let bundles = schedule
            .times()
            .iter()
            .map(|&t| CoefficientBundle::at(&config, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            schedule,
            order,
            bundles,
        })
    }

    pub fn from_run(run: &SamplerRun) -> Result<Self> {
        Self::new(run.config.clone(), run.schedule.clone(), run.order)
    }

    pub fn config(&self) -> &AugmentedConfig {
        &self.config
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn bundles(&self) -> &[CoefficientBundle] {
        &self.bundles
    }

    /// Denoiser calls per sample: one per step plus the final prediction.
    pub fn nfe(&self) -> usize {
        self.schedule.steps() + 1
    }

    /// Runs one trajectory from `prior`, optionally recording every denoiser call.
    pub fn run_from<D: Denoiser + ?Sized>(
        &self,
        denoiser: &D,
        prior: AugmentedState,
        mut trajectory: Option<&mut Vec<TrajectoryPoint>>,
    ) -> Result<DVector<f64>> {
        if prior.n_vars() != self.config.n_vars() || prior.t != 0.0 {
            return Err(Error::Precondition(
                "prior must have N variables and t = 0".into(),
            ));
        }
        let times = self.schedule.times();
        let mut cache = HistoryCache::new(self.order);
        let mut state = prior;
        for (i, bundle) in self.bundles[..times.len() - 1].iter().enumerate() {
            let (next, point) = step_inner(&state, denoiser, bundle, times[i + 1], &mut cache)?;
            if let Some(tr) = trajectory.as_deref_mut() {
                tr.push(point);
            }
            state = next;
        }
        let last = &self.bundles[times.len() - 1];
        let point = predict(&state, denoiser, last).map_err(|e| match e {
            Error::NonFinite { t, .. } => Error::NonFinite {
                stage: "final prediction",
                t,
            },
            other => other,
        })?;
        let out = point.x_hat.clone();
        if let Some(tr) = trajectory {
            tr.push(point);
        }
        Ok(out)
    }

    /// Runs one trajectory per prior in parallel.
    pub fn run_priors<D: Denoiser + ?Sized>(
        &self,
        denoiser: &D,
        priors: Vec<AugmentedState>,
    ) -> Result<Vec<DVector<f64>>> {
        priors
            .into_par_iter()
            .map(|p| self.run_from(denoiser, p, None))
            .collect()
    }

    /// `batch` samples; sample `i` draws its prior from stream `(seed, i)`.
    pub fn sample<D: Denoiser + ?Sized>(
        &self,
        denoiser: &D,
        d: usize,
        seed: u64,
        batch: usize,
    ) -> Result<Vec<DVector<f64>>> {
        (0..batch as u64)
            .into_par_iter()
            .map(|i| {
                let prior = sample_prior(&self.config, d, &mut sample_stream(seed, i))?;
                self.run_from(denoiser, prior, None)
            })
            .collect()
    }

    /// Like [`TadaSampler::sample`], also returning every trajectory.
    pub fn sample_with_trajectories<D: Denoiser + ?Sized>(
        &self,
        denoiser: &D,
        d: usize,
        seed: u64,
        batch: usize,
    ) -> Result<Vec<(DVector<f64>, Vec<TrajectoryPoint>)>> {
        (0..batch as u64)
            .into_par_iter()
            .map(|i| {
                let prior = sample_prior(&self.config, d, &mut sample_stream(seed, i))?;
                let mut tr = Vec::with_capacity(self.nfe());
                let out = self.run_from(denoiser, prior, Some(&mut tr))?;
                Ok((out, tr))
            })
            .collect()
    }
}

pub fn tada_sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    run: &SamplerRun,
    d: usize,
) -> Result<Vec<DVector<f64>>> {
    TadaSampler::from_run(run)?.sample(denoiser, d, run.seed, run.batch)
}

const GAUSS3_NODES: [f64; 3] = [-0.774_596_669_241_483_4, 0.0, 0.774_596_669_241_483_4];
const GAUSS3_WEIGHTS: [f64; 3] = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];

/// Plain flow-matching sampler `x' = (x_hat - x) / (1 - t)` with a unit
/// Gaussian prior, written directly in one variable. The velocity is
/// extrapolated with the same Adams–Bashforth rule; its interpolant is
/// evaluated in Lagrange form and integrated by 3-point Gauss–Legendre,
/// exact for the polynomial degrees used (at most 2).
pub fn fm_baseline_sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    schedule: &Schedule,
    order: usize,
    d: usize,
    seed: u64,
    batch: usize,
) -> Result<Vec<DVector<f64>>> {
    check_order(order, schedule)?;
    if !(schedule.t_final() < 1.0) {
        return Err(Error::InvalidConfig(
            "schedule must end before t = 1".into(),
        ));
    }
    (0..batch as u64)
        .into_par_iter()
        .map(|i| fm_trajectory(denoiser, schedule, order, d, &mut sample_stream(seed, i)))
        .collect()
}

fn fm_trajectory<D: Denoiser + ?Sized, R: Rng>(
    denoiser: &D,
    schedule: &Schedule,
    order: usize,
    d: usize,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let times = schedule.times();
    let mut x = DVector::from_fn(d, |_, _| standard_normal(rng));
    let mut history: VecDeque<(f64, DVector<f64>)> = VecDeque::with_capacity(order);
    let denoise = |x: &DVector<f64>, t: f64| -> Result<DVector<f64>> {
        // reweighted input x / t with noise level (1 - t) / t; pure noise at t = 0
        let (y, sigma_bar) = if t == 0.0 {
            (x.clone(), f64::INFINITY)
        } else {
            (x / t, (1.0 - t) / t)
        };
        let x_hat = denoiser.denoise(&DenoiseQuery {
            y: &y,
            sigma_bar,
            t,
        });
        finite_or(&x_hat, "denoiser", t)?;
        Ok(x_hat)
    };
    for w in times.windows(2) {
        let (t, t_next) = (w[0], w[1]);
        let velocity = (denoise(&x, t)? - &x) / (1.0 - t);
        if history.len() == order {
            history.pop_front();
        }
        history.push_back((t, velocity));
        let half = 0.5 * (t_next - t);
        let mid = 0.5 * (t_next + t);
        let mut increment = DVector::zeros(d);
        for (node, weight) in GAUSS3_NODES.iter().zip(GAUSS3_WEIGHTS) {
            let tau = mid + half * node;
            for (j, (tj, vj)) in history.iter().enumerate() {
                let basis: f64 = history
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != j)
                    .map(|(_, (ti, _))| (tau - ti) / (tj - ti))
                    .product();
                increment += vj * (weight * half * basis);
            }
        }
        x += increment;
        finite_or(&x, "integrator", t)?;
    }
    denoise(&x, schedule.t_final())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ConstantDenoiser;
    use crate::oracle::trapezoid;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn cfg(n: usize) -> AugmentedConfig {
        AugmentedConfig::new(n, 1.0, 1e-3).unwrap()
    }

    #[test]
    fn schedule_examples() {
        let c = cfg(1);
        let s = make_schedule(Scheme::Uniform, 2, 1, 0.0, &c).unwrap();
        assert_eq!(s.times(), &[0.0, 0.5, 1.0]);
        let s = make_schedule(Scheme::Polynomial { p: 2.0 }, 2, 1, 0.0, &c).unwrap();
        assert_eq!(s.times(), &[0.0, 0.25, 1.0]);
        for steps in [1, 3, 7, 20] {
            let a = make_schedule(Scheme::Polynomial { p: 1.0 }, steps, 1, 1e-3, &c).unwrap();
            let b = make_schedule(Scheme::Uniform, steps, 1, 1e-3, &c).unwrap();
            assert_eq!(a.times(), b.times());
        }
    }

    #[test]
    fn schedule_errors() {
        let c = cfg(2);
        assert!(make_schedule(Scheme::Uniform, 2, 3, 1e-3, &c).is_err());
        assert!(make_schedule(Scheme::Uniform, 0, 1, 1e-3, &c).is_err());
        assert!(make_schedule(Scheme::Uniform, 4, 1, 0.5, &c).is_err());
        assert!(make_schedule(Scheme::Polynomial { p: 0.0 }, 4, 1, 1e-3, &c).is_err());
        assert!(make_schedule(Scheme::LogSnr { t_floor: 1e-3 }, 4, 1, 0.0, &c).is_err());
        assert!(Scheme::parse("cosine", None, None).is_err());
        assert_eq!(
            Scheme::parse("polynomial-t", None, None).unwrap(),
            Scheme::Polynomial { p: 2.0 }
        );
    }

    #[test]
    fn logsnr_schedule_is_log_uniform() {
        let c = cfg(2);
        let s = make_schedule(Scheme::LogSnr { t_floor: 1e-3 }, 8, 3, 1e-3, &c).unwrap();
        let t = s.times();
        assert_eq!((t[0], t[1], s.t_final()), (0.0, 1e-3, 1.0 - 1e-3));
        let lg: Vec<f64> = t[1..]
            .iter()
            .map(|&t| CoefficientBundle::at(&c, t).unwrap().gamma.ln())
            .collect();
        let gap = lg[1] - lg[0];
        for w in lg.windows(2) {
            assert_abs_diff_eq!(w[1] - w[0], gap, epsilon = 1e-9 * gap.abs());
        }
    }

    #[test]
    fn cache_ring_semantics() {
        let mut cache = HistoryCache::new(2);
        for (i, t) in [0.0, 0.1, 0.2].iter().enumerate() {
            cache.push(*t, DVector::from_element(1, i as f64)).unwrap();
            assert_eq!(cache.len(), (i + 1).min(2));
        }
        let times: Vec<f64> = cache.entries().map(|e| e.0).collect();
        assert_eq!(times, vec![0.1, 0.2]);
        assert!(cache.push(0.2, DVector::zeros(1)).is_err());
    }

    fn cache_of(points: &[(f64, f64)]) -> HistoryCache {
        let mut c = HistoryCache::new(points.len());
        for &(t, f) in points {
            c.push(t, DVector::from_element(1, f)).unwrap();
        }
        c
    }

    #[test]
    fn psi_examples() {
        let c = cache_of(&[(0.2, 3.0)]);
        assert_abs_diff_eq!(
            psi_integral(&c, 0.2, 0.7, 1).unwrap()[(0, 0)],
            1.5,
            epsilon = 1e-15
        );
        let p = psi_integral(&c, 0.2, 0.7, 2).unwrap();
        assert_abs_diff_eq!(p[(0, 0)], 3.0 * 0.25 / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p[(1, 0)], 1.5, epsilon = 1e-15);
        // P(tau) = tau through two nodes; integral over [0, 1] is 1/2
        let c = cache_of(&[(-1.0, -1.0), (0.0, 0.0)]);
        assert_abs_diff_eq!(
            psi_integral(&c, 0.0, 1.0, 1).unwrap()[(0, 0)],
            0.5,
            epsilon = 1e-15
        );
    }

    #[test]
    fn psi_errors() {
        assert_eq!(
            psi_integral(&HistoryCache::new(2), 0.0, 1.0, 1),
            Err(Error::EmptyCache)
        );
        let c = cache_of(&[(0.5, 1.0)]);
        assert!(psi_integral(&c, 0.5, 0.5, 1).is_err());
        assert!(psi_integral(&c, 0.4, 0.6, 1).is_err());
    }

    fn lagrange_eval(points: &[(f64, f64)], tau: f64) -> f64 {
        points
            .iter()
            .enumerate()
            .map(|(j, &(tj, fj))| {
                fj * points
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != j)
                    .map(|(_, &(ti, _))| (tau - ti) / (tj - ti))
                    .product::<f64>()
            })
            .sum()
    }

    // 10^5 panels: the trapezoid rule's own relative error on these
    // quadratic integrands is ~(1/panels)^2 / 2, so 10^4 would sit at 5e-9.
    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn psi_matches_quadrature(
            n in 1usize..=4,
            order in 1usize..=3,
            h in 0.01f64..0.3,
            forces in proptest::collection::vec(-5.0f64..5.0, 3),
        ) {
            let t_from = 0.4;
            let t_to = t_from + h;
            let points: Vec<(f64, f64)> = (0..order)
                .map(|j| (t_from - (order - 1 - j) as f64 * 0.07, forces[j]))
                .collect();
            let c = cache_of(&points);
            let psi = psi_integral(&c, t_from, t_to, n).unwrap();
            for k in 0..n {
                let m = n - 1 - k;
                let f = |tau: f64| (t_to - tau).powi(m as i32) / factorial(m) * lagrange_eval(&points, tau);
                let q = trapezoid(f, t_from, t_to, 100_000);
                // relative to the integral of |f|: the integrand may change sign
                let scale = trapezoid(|tau| f(tau).abs(), t_from, t_to, 100_000);
                prop_assert!((psi[(k, 0)] - q).abs() <= 1e-9 * scale, "k={} psi={} q={}", k, psi[(k, 0)], q);
            }
        }
    }

    #[test]
    fn zero_force_step_is_homogeneous() {
        let c = cfg(3);
        let vars = DMatrix::from_row_slice(3, 2, &[1.0, -1.0, 0.5, 2.0, -0.3, 0.7]);
        let state = AugmentedState::new(vars.clone(), 0.3);
        let bundle = CoefficientBundle::at(&c, 0.3).unwrap();
        // the Taylor extrapolation of the state to t = 1 is a zero-force prediction
        let s = 0.7f64;
        let x_hat = vars.tr_mul(&DVector::from_vec(vec![1.0, s, s * s / 2.0]));
        let denoiser = ConstantDenoiser(x_hat);
        let mut cache = HistoryCache::new(1);
        let next = tada_step(&state, &denoiser, &bundle, 0.5, &mut cache).unwrap();
        let expect = shift_transition(3, 0.2) * vars;
        assert!((next.vars - expect).amax() < 1e-12);
        assert_eq!(next.t, 0.5);
    }

    #[test]
    fn nan_denoiser_names_stage() {
        let c = cfg(2);
        let state = AugmentedState::new(DMatrix::zeros(2, 1), 0.0);
        let bundle = CoefficientBundle::at(&c, 0.0).unwrap();
        let denoiser = ConstantDenoiser(DVector::from_element(1, f64::NAN));
        let mut cache = HistoryCache::new(1);
        let err = tada_step(&state, &denoiser, &bundle, 0.1, &mut cache).unwrap_err();
        assert_eq!(
            err,
            Error::NonFinite {
                stage: "denoiser",
                t: 0.0
            }
        );
    }

    #[test]
    fn prior_scaling() {
        let c = AugmentedConfig::new(2, 4.0, 1e-3).unwrap();
        let eps = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let p = prior_from_noise(&c, &eps).unwrap();
        assert_eq!(p.vars, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 6.0, 8.0]));
        let i = prior_from_noise(&cfg(2), &eps).unwrap();
        assert_eq!(i.vars, eps);
    }

    #[test]
    fn sampler_rejects_bad_order() {
        let c = cfg(2);
        let s = make_schedule(Scheme::Uniform, 5, 1, 1e-3, &c).unwrap();
        assert!(TadaSampler::new(c.clone(), s.clone(), 0).is_err());
        assert!(TadaSampler::new(c.clone(), s.clone(), 4).is_err());
        let short = make_schedule(Scheme::Uniform, 2, 1, 1e-3, &c).unwrap();
        assert!(TadaSampler::new(c, short, 3).is_err());
    }
}
