use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use tada_core::denoiser::{
    gmm_posterior_mean, pointset_posterior_mean, DenoiseQuery, Denoiser, GaussianMixture,
    PointDataset,
};
use tada_core::dynamics::AugmentedConfig;
use tada_core::rng::aux_stream;
use tada_core::sampler::{
    make_schedule, Schedule, Scheme, DEFAULT_ORDER, DEFAULT_POLY_EXPONENT, DEFAULT_T_FLOOR,
    MAX_ORDER,
};

use crate::CliError;

/// Auxiliary stream tags; sample streams are indexed by sample id instead.
pub const DATASET_STREAM: u64 = 0;
pub const REFERENCE_STREAM: u64 = 1;
pub const SHARED_NOISE_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub sampler: SamplerSpec,
    #[serde(default)]
    pub metrics: MetricsSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Diagonal-covariance mixture given explicitly.
    Gmm {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<Vec<f64>>,
    },
    /// Uniform empirical distribution over the listed points.
    Pointset { points: Vec<Vec<f64>> },
    /// `modes` isotropic components evenly spaced on a circle.
    Ring { modes: usize, radius: f64, std: f64 },
    /// `n` points drawn uniformly from the 4x4 checkerboard.
    Checkerboard { n: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSpec {
    pub n_vars: usize,
    pub k: f64,
    /// Full prior covariance; overrides `n_vars` and `k`.
    pub sigma0: Option<Vec<Vec<f64>>>,
    pub order: usize,
    pub scheme: String,
    pub p: f64,
    pub t_floor: f64,
    pub steps: usize,
    pub delta: f64,
    pub seed: u64,
    pub batch: usize,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self {
            n_vars: 2,
            k: 1.0,
            sigma0: None,
            order: DEFAULT_ORDER,
            scheme: "polynomial-t".into(),
            p: DEFAULT_POLY_EXPONENT,
            t_floor: DEFAULT_T_FLOOR,
            steps: 15,
            delta: 1e-3,
            seed: 0,
            batch: 10_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    SlicedW2,
    Energy,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::SlicedW2 => "sliced-w2",
            Metric::Energy => "energy",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSpec {
    pub names: Vec<Metric>,
    pub projections: usize,
    /// Size of the ground-truth batch drawn from the dataset.
    pub reference_size: usize,
}

impl Default for MetricsSpec {
    fn default() -> Self {
        Self {
            names: vec![Metric::SlicedW2, Metric::Energy],
            projections: 128,
            reference_size: 10_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    pub dir: PathBuf,
    pub trajectory: bool,
    pub plot: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            trajectory: false,
            plot: false,
        }
    }
}

fn config_error(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_error(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.dataset.validate()?;
        let s = &self.sampler;
        if s.order == 0 || s.order > MAX_ORDER {
            return Err(config_error(format!(
                "sampler.order must be in 1..={MAX_ORDER}, got {}",
                s.order
            )));
        }
        if s.batch == 0 {
            return Err(config_error("sampler.batch must be positive"));
        }
        let m = &self.metrics;
        if m.projections == 0 || m.reference_size == 0 {
            return Err(config_error(
                "metrics.projections and metrics.reference_size must be positive",
            ));
        }
        // dynamics, schedule and NFE preconditions
        self.schedule(&self.augmented()?)?;
        Ok(())
    }

    pub fn augmented(&self) -> Result<AugmentedConfig, CliError> {
        let s = &self.sampler;
        let cfg = match &s.sigma0 {
            Some(rows) => AugmentedConfig::with_sigma0(matrix_from_rows(rows)?, s.delta),
            None => AugmentedConfig::new(s.n_vars, s.k, s.delta),
        };
        cfg.map_err(|e| config_error(format!("sampler: {e}")))
    }

    pub fn scheme(&self) -> Result<Scheme, CliError> {
        let s = &self.sampler;
        Scheme::parse(&s.scheme, Some(s.p), Some(s.t_floor))
            .map_err(|e| config_error(format!("sampler.scheme: {e}")))
    }

    pub fn schedule(&self, config: &AugmentedConfig) -> Result<Schedule, CliError> {
        let s = &self.sampler;
        make_schedule(self.scheme()?, s.steps, s.order, s.delta, config).map_err(|e| {
            config_error(format!(
                "schedule (steps {}, NFE {}, order {}): {e}",
                s.steps,
                s.steps + 1,
                s.order
            ))
        })
    }

    /// Copy with the NFE budget set; NFE = steps + 1.
    pub fn with_nfe(&self, nfe: usize) -> Result<Self, CliError> {
        if nfe < 2 {
            return Err(config_error(format!("NFE must be at least 2, got {nfe}")));
        }
        let mut cfg = self.clone();
        cfg.sampler.steps = nfe - 1;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Copy with the prior scale replaced; incompatible with an explicit Σ₀.
    pub fn with_k(&self, k: f64) -> Result<Self, CliError> {
        if self.sampler.sigma0.is_some() {
            return Err(config_error(
                "a k sweep requires the default prior family; remove sampler.sigma0",
            ));
        }
        if !(k > 0.0) || !k.is_finite() {
            return Err(config_error(format!(
                "k must be positive and finite, got {k}"
            )));
        }
        let mut cfg = self.clone();
        cfg.sampler.k = k;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, CliError> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(config_error(
            "sampler.sigma0 must be a non-empty square matrix",
        ));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn vector(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

impl DatasetSpec {
    fn validate(&self) -> Result<(), CliError> {
        match self {
            DatasetSpec::Checkerboard { n } if *n == 0 => {
                Err(config_error("dataset.checkerboard.n must be positive"))
            }
            DatasetSpec::Checkerboard { .. } => Ok(()),
            // the constructors carry the remaining range checks
            _ => self.build(0).map(|_| ()),
        }
    }

    /// Materialises the dataset; only the checkerboard draw consumes `seed`.
    pub fn build(&self, seed: u64) -> Result<Dataset, CliError> {
        let wrap = |e: tada_core::Error| config_error(format!("dataset: {e}"));
        Ok(match self {
            DatasetSpec::Gmm {
                weights,
                means,
                variances,
            } => Dataset::Mixture(
                GaussianMixture::new(
                    weights.clone(),
                    means.iter().map(|m| vector(m)).collect(),
                    variances.iter().map(|v| vector(v)).collect(),
                )
                .map_err(wrap)?,
            ),
            DatasetSpec::Pointset { points } => Dataset::Points(
                PointDataset::new(points.iter().map(|p| vector(p)).collect()).map_err(wrap)?,
            ),
            DatasetSpec::Ring { modes, radius, std } => {
                Dataset::Mixture(GaussianMixture::ring(*modes, *radius, *std).map_err(wrap)?)
            }
            DatasetSpec::Checkerboard { n } => Dataset::Points(
                PointDataset::checkerboard(*n, &mut aux_stream(seed, DATASET_STREAM))
                    .map_err(wrap)?,
            ),
        })
    }
}

/// A dataset with an analytic posterior-mean denoiser and an exact sampler.
#[derive(Debug, Clone)]
pub enum Dataset {
    Mixture(GaussianMixture),
    Points(PointDataset),
}

impl Dataset {
    pub fn sample_batch(&self, count: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = aux_stream(seed, REFERENCE_STREAM);
        (0..count)
            .map(|_| match self {
                Dataset::Mixture(g) => g.sample(&mut rng),
                Dataset::Points(p) => p.sample(&mut rng),
            })
            .collect()
    }
}

impl Denoiser for Dataset {
    fn dim(&self) -> usize {
        match self {
            Dataset::Mixture(g) => g.dim(),
            Dataset::Points(p) => p.dim(),
        }
    }

    fn denoise(&self, query: &DenoiseQuery<'_>) -> DVector<f64> {
        match self {
            Dataset::Mixture(g) => gmm_posterior_mean(g, query),
            Dataset::Points(p) => pointset_posterior_mean(p, query),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const RING: &str = r#"
[dataset.ring]
modes = 8
radius = 2.0
std = 0.2

[sampler]
n_vars = 2
steps = 15
batch = 100
"#;

    #[test]
    fn parses_minimal_ring_config() {
        let cfg = ExperimentConfig::parse(RING).unwrap();
        assert_eq!(cfg.sampler.order, DEFAULT_ORDER);
        assert_eq!(cfg.sampler.scheme, "polynomial-t");
        assert!(matches!(cfg.dataset, DatasetSpec::Ring { modes: 8, .. }));
        assert!(!cfg.output.plot);
    }

    #[test]
    fn unknown_keys_are_rejected_everywhere() {
        for (section, key) in [
            ("[sampler]", "stepz = 3"),
            ("[metrics]", "projection = 3"),
            ("[output]", "plots = true"),
            ("[dataset.ring]", "radiuz = 1.0"),
        ] {
            let text = if RING.contains(section) {
                RING.replace(section, &format!("{section}\n{key}"))
            } else {
                format!("{RING}\n{section}\n{key}\n")
            };
            let err = ExperimentConfig::parse(&text).unwrap_err();
            assert!(matches!(err, CliError::Config(_)), "{section} {key}");
        }
        assert!(ExperimentConfig::parse(&format!("extra = 1\n{RING}")).is_err());
    }

    #[test]
    fn range_violations_are_config_errors() {
        for (from, to) in [
            ("n_vars = 2", "n_vars = 9"),
            ("n_vars = 2", "n_vars = 0"),
            ("steps = 15", "steps = 2"),
            ("batch = 100", "batch = 0"),
            ("std = 0.2", "std = -1.0"),
            ("n_vars = 2", "n_vars = 2\nscheme = \"cosine\""),
            ("n_vars = 2", "n_vars = 2\ndelta = 0.7"),
        ] {
            let err = ExperimentConfig::parse(&RING.replace(from, to)).unwrap_err();
            assert!(matches!(err, CliError::Config(_)), "{to}");
        }
    }

    #[test]
    fn nfe_below_order_is_rejected() {
        let cfg = ExperimentConfig::parse(RING).unwrap();
        assert!(cfg.with_nfe(3).is_err());
        assert_eq!(cfg.with_nfe(4).unwrap().sampler.steps, 3);
    }

    #[test]
    fn k_override_checks_range_and_prior_kind() {
        let cfg = ExperimentConfig::parse(RING).unwrap();
        assert!(cfg.with_k(0.0).is_err());
        assert!(cfg.with_k(-1.0).is_err());
        assert_eq!(cfg.with_k(10.0).unwrap().sampler.k, 10.0);
        let explicit = RING.replace("n_vars = 2", "sigma0 = [[1.0, 0.0], [0.0, 2.0]]");
        let cfg = ExperimentConfig::parse(&explicit).unwrap();
        assert_eq!(cfg.augmented().unwrap().n_vars(), 2);
        assert!(cfg.with_k(1.0).is_err());
    }

    #[test]
    fn explicit_mixture_and_pointset_build() {
        let gmm = r#"
[dataset.gmm]
weights = [0.5, 0.5]
means = [[-1.0], [1.0]]
variances = [[0.1], [0.1]]
"#;
        let cfg = ExperimentConfig::parse(gmm).unwrap();
        assert_eq!(cfg.dataset.build(0).unwrap().dim(), 1);
        let pts = "[dataset.pointset]\npoints = [[0.0, 1.0], [2.0, 3.0]]\n";
        let cfg = ExperimentConfig::parse(pts).unwrap();
        assert_eq!(cfg.dataset.build(0).unwrap().dim(), 2);
        let bad = "[dataset.gmm]\nweights = [1.0]\nmeans = [[0.0]]\nvariances = [[0.0]]\n";
        assert!(ExperimentConfig::parse(bad).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = ExperimentConfig::parse(RING).unwrap();
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
    }
}
