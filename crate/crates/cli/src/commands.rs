use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::Serialize;
use tada_core::analysis::{gamma_dot, y_dyn_coefficients};
use tada_core::denoiser::Denoiser;
use tada_core::dynamics::{AugmentedConfig, CoefficientBundle};
use tada_core::metrics::{diversity_spread, energy_distance, sliced_wasserstein2, SampleBatch};
use tada_core::rng::{aux_stream, sample_stream};
use tada_core::sampler::{draw_noise, fm_baseline_sample, prior_from_noise, TadaSampler};
use tada_core::verify::{run_checks, CheckRecord, VerifyOptions};

use crate::config::{Dataset, ExperimentConfig, Metric, SHARED_NOISE_STREAM};
use crate::output::{
    cells, ensure_dir, indexed, num, write_json, write_samples, write_scatter, write_trajectories,
    CsvWriter,
};
use crate::CliError;

pub const SAMPLES_FILE: &str = "samples.csv";
pub const META_FILE: &str = "run_meta.json";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const SCATTER_FILE: &str = "scatter.png";
pub const METRICS_FILE: &str = "metrics.csv";
pub const DIVERSITY_FILE: &str = "diversity.csv";
pub const COEFFS_FILE: &str = "coeffs.csv";
pub const REPORT_FILE: &str = "verify_report.json";

/// Points of the default `dump-coeffs` grid on `[0, 1 - delta]`.
pub const DEFAULT_GRID_POINTS: usize = 101;

#[derive(Debug, Serialize)]
struct RunMeta<'a> {
    command: &'a str,
    config: &'a ExperimentConfig,
    dim: usize,
    nfe: Vec<usize>,
    times: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    k: Option<&'a [f64]>,
}

fn out_path(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    cfg.output.dir.join(name)
}

fn run_error(e: tada_core::Error) -> CliError {
    CliError::Run(e.to_string())
}

fn invalid(e: tada_core::Error) -> CliError {
    CliError::Config(e.to_string())
}

/// Samples, schedule times and NFE for one TADA run of `cfg`.
pub struct SampleRun {
    pub samples: Vec<DVector<f64>>,
    pub times: Vec<f64>,
    pub nfe: usize,
}

fn tada_run(cfg: &ExperimentConfig, data: &Dataset) -> Result<SampleRun, CliError> {
    let aug = cfg.augmented()?;
    let schedule = cfg.schedule(&aug)?;
    let s = &cfg.sampler;
    let sampler = TadaSampler::new(aug, schedule, s.order).map_err(invalid)?;
    let samples = sampler
        .sample(data, data.dim(), s.seed, s.batch)
        .map_err(run_error)?;
    Ok(SampleRun {
        samples,
        times: sampler.schedule().times().to_vec(),
        nfe: sampler.nfe(),
    })
}

/// `sample`: one TADA batch.
pub fn cmd_sample(cfg: &ExperimentConfig) -> Result<SampleRun, CliError> {
    let data = cfg.dataset.build(cfg.sampler.seed)?;
    let aug = cfg.augmented()?;
    let schedule = cfg.schedule(&aug)?;
    let s = &cfg.sampler;
    let sampler = TadaSampler::new(aug, schedule, s.order).map_err(invalid)?;
    ensure_dir(&cfg.output.dir)?;
    let d = data.dim();
    let samples = if cfg.output.trajectory {
        let runs = sampler
            .sample_with_trajectories(&data, d, s.seed, s.batch)
            .map_err(run_error)?;
        let (samples, trajectories): (Vec<_>, Vec<_>) = runs.into_iter().unzip();
        write_trajectories(&out_path(cfg, TRAJECTORY_FILE), &trajectories)?;
        samples
    } else {
        sampler
            .sample(&data, d, s.seed, s.batch)
            .map_err(run_error)?
    };
    let run = SampleRun {
        samples,
        times: sampler.schedule().times().to_vec(),
        nfe: sampler.nfe(),
    };
    finish_single(cfg, "sample", d, &run)?;
    Ok(run)
}

/// `fm-baseline`: the one-variable flow-matching sampler on the same
/// schedule, order and seeds. The augmented prior settings (`n_vars`, `k`,
/// `sigma0`) do not apply; its prior is the unit Gaussian.
pub fn cmd_fm_baseline(cfg: &ExperimentConfig) -> Result<SampleRun, CliError> {
    let data = cfg.dataset.build(cfg.sampler.seed)?;
    let s = &cfg.sampler;
    let aug = AugmentedConfig::new(1, 1.0, s.delta).map_err(invalid)?;
    let schedule = cfg.schedule(&aug)?;
    ensure_dir(&cfg.output.dir)?;
    let d = data.dim();
    let samples =
        fm_baseline_sample(&data, &schedule, s.order, d, s.seed, s.batch).map_err(run_error)?;
    let run = SampleRun {
        samples,
        times: schedule.times().to_vec(),
        nfe: schedule.steps() + 1,
    };
    finish_single(cfg, "fm-baseline", d, &run)?;
    Ok(run)
}

fn finish_single(
    cfg: &ExperimentConfig,
    command: &str,
    dim: usize,
    run: &SampleRun,
) -> Result<(), CliError> {
    write_samples(&out_path(cfg, SAMPLES_FILE), &run.samples)?;
    write_json(
        &out_path(cfg, META_FILE),
        &RunMeta {
            command,
            config: cfg,
            dim,
            nfe: vec![run.nfe],
            times: vec![run.times.clone()],
            k: None,
        },
    )?;
    if cfg.output.plot {
        write_scatter(&out_path(cfg, SCATTER_FILE), &run.samples);
    }
    Ok(())
}

/// One `(nfe, metric, value)` row of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub nfe: usize,
    pub metric: Metric,
    pub value: f64,
}

/// `sweep-nfe`: one TADA batch per NFE budget, scored against an exact
/// draw from the dataset. All budgets are validated before any sampling.
pub fn cmd_sweep_nfe(
    cfg: &ExperimentConfig,
    nfe_list: &[usize],
) -> Result<Vec<MetricRow>, CliError> {
    if nfe_list.is_empty() {
        return Err(CliError::Config("empty NFE list".into()));
    }
    let configs = nfe_list
        .iter()
        .map(|&n| cfg.with_nfe(n))
        .collect::<Result<Vec<_>, _>>()?;
    let data = cfg.dataset.build(cfg.sampler.seed)?;
    let reference = SampleBatch::new(
        data.sample_batch(cfg.metrics.reference_size, cfg.sampler.seed),
        "reference",
    )
    .map_err(run_error)?;
    ensure_dir(&cfg.output.dir)?;
    let mut rows = Vec::new();
    let mut times = Vec::new();
    for (&nfe, c) in nfe_list.iter().zip(&configs) {
        let run = tada_run(c, &data)?;
        times.push(run.times);
        let batch = SampleBatch::new(run.samples, format!("nfe-{nfe}")).map_err(run_error)?;
        for &metric in &cfg.metrics.names {
            let value = match metric {
                Metric::SlicedW2 => sliced_wasserstein2(
                    &batch,
                    &reference,
                    cfg.metrics.projections,
                    cfg.sampler.seed,
                ),
                Metric::Energy => energy_distance(&batch, &reference),
            }
            .map_err(run_error)?;
            rows.push(MetricRow { nfe, metric, value });
        }
        if cfg.output.plot {
            write_scatter(
                &out_path(cfg, &format!("scatter_nfe{nfe}.png")),
                batch.samples(),
            );
        }
    }
    let header = ["nfe", "metric", "value"].map(String::from);
    let mut w = CsvWriter::create(&out_path(cfg, METRICS_FILE), &header)?;
    for r in &rows {
        w.row(&[r.nfe.to_string(), r.metric.to_string(), num(r.value)])?;
    }
    w.finish()?;
    write_json(
        &out_path(cfg, META_FILE),
        &RunMeta {
            command: "sweep-nfe",
            config: cfg,
            dim: data.dim(),
            nfe: nfe_list.to_vec(),
            times,
            k: None,
        },
    )?;
    Ok(rows)
}

/// `sweep-k`: `sampler.batch` runs per prior scale. The last-variable
/// noise, which alone sets the initial `y` under the diagonal prior, is one
/// shared draw; the remaining noise rows are drawn per run. Returns the
/// diversity spread per `k`.
pub fn cmd_sweep_k(cfg: &ExperimentConfig, k_list: &[f64]) -> Result<Vec<f64>, CliError> {
    if k_list.is_empty() {
        return Err(CliError::Config("empty k list".into()));
    }
    let configs = k_list
        .iter()
        .map(|&k| cfg.with_k(k))
        .collect::<Result<Vec<_>, _>>()?;
    let data = cfg.dataset.build(cfg.sampler.seed)?;
    let d = data.dim();
    let s = &cfg.sampler;
    let shared = draw_noise(1, d, &mut aux_stream(s.seed, SHARED_NOISE_STREAM));
    let n = s.n_vars;
    let noise: Vec<_> = (0..s.batch as u64)
        .map(|i| {
            let mut eps = draw_noise(n, d, &mut sample_stream(s.seed, i));
            eps.row_mut(n - 1).copy_from(&shared.row(0));
            eps
        })
        .collect();
    ensure_dir(&cfg.output.dir)?;
    let mut groups = Vec::new();
    let mut times = Vec::new();
    for (&k, c) in k_list.iter().zip(&configs) {
        let aug = c.augmented()?;
        let schedule = c.schedule(&aug)?;
        let priors = noise
            .iter()
            .map(|eps| prior_from_noise(&aug, eps))
            .collect::<Result<Vec<_>, _>>()
            .map_err(run_error)?;
        let sampler = TadaSampler::new(aug, schedule, s.order).map_err(invalid)?;
        times.push(sampler.schedule().times().to_vec());
        let samples = sampler.run_priors(&data, priors).map_err(run_error)?;
        if cfg.output.plot {
            write_scatter(&out_path(cfg, &format!("scatter_k{k}.png")), &samples);
        }
        groups.push(SampleBatch::new(samples, format!("k={k}")).map_err(run_error)?);
    }
    let spreads = diversity_spread(&groups).map_err(run_error)?;
    let header = ["k", "spread"].map(String::from);
    let mut w = CsvWriter::create(&out_path(cfg, DIVERSITY_FILE), &header)?;
    for (k, spread) in k_list.iter().zip(&spreads) {
        w.row(&[num(*k), num(*spread)])?;
    }
    w.finish()?;
    let nfe = vec![s.steps + 1; k_list.len()];
    write_json(
        &out_path(cfg, META_FILE),
        &RunMeta {
            command: "sweep-k",
            config: cfg,
            dim: d,
            nfe,
            times,
            k: Some(k_list),
        },
    )?;
    Ok(spreads)
}

/// Uniform grid of `points` times on `[0, 1 - delta]`.
pub fn default_grid(delta: f64, points: usize) -> Vec<f64> {
    let end = 1.0 - delta;
    match points {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..points)
            .map(|i| end * (i as f64 / (points - 1) as f64))
            .collect(),
    }
}

/// `dump-coeffs`: closed-form coefficients on a time grid. At `t = 0` the
/// reweighting uses its limit direction with `gamma = 0`; the y-dynamics
/// coefficients are singular there and written as `NaN`.
pub fn cmd_dump_coeffs(
    n_vars: usize,
    k: f64,
    delta: f64,
    grid: &[f64],
    out_dir: &Path,
) -> Result<(), CliError> {
    let cfg = AugmentedConfig::new(n_vars, k, delta).map_err(invalid)?;
    let end = cfg.t_final();
    if grid.is_empty() {
        return Err(CliError::Config("empty time grid".into()));
    }
    if let Some(t) = grid.iter().find(|&&t| !(0.0..=end).contains(&t)) {
        return Err(CliError::Config(format!(
            "grid time {t} outside [0, {end}]"
        )));
    }
    ensure_dir(out_dir)?;
    let n = n_vars;
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain(indexed("mu", n))
        .chain((0..n * n).map(|ij| format!("sigma_{}_{}", ij / n, ij % n)))
        .chain(indexed("r", n))
        .chain(["gamma", "gamma_dot", "alpha", "beta"].map(String::from))
        .chain(indexed("w", n))
        .collect();
    let mut w = CsvWriter::create(&out_dir.join(COEFFS_FILE), &header)?;
    for &t in grid {
        let b = CoefficientBundle::at(&cfg, t).map_err(run_error)?;
        let mut row: Vec<String> = std::iter::once(num(t))
            .chain(cells(&b.mu))
            .chain(b.sigma.transpose().iter().map(|&x| num(x)))
            .chain(cells(&b.r))
            .chain(std::iter::once(num(b.gamma)))
            .collect();
        if t > 0.0 {
            let y = y_dyn_coefficients(&cfg, t).map_err(run_error)?;
            row.push(num(gamma_dot(&cfg, t).map_err(run_error)?));
            row.push(num(y.alpha));
            row.push(num(y.beta));
            row.extend(cells(&y.w));
        } else {
            row.extend(std::iter::repeat_n(num(f64::NAN), 3 + n));
        }
        w.row(&row)?;
    }
    w.finish()
}

/// `verify`: runs the registered checks whose name contains `filter` and
/// writes the JSON report. A filter matching nothing is a usage error.
pub fn cmd_verify(
    filter: Option<&str>,
    inject_fault: bool,
    out_dir: &Path,
) -> Result<Vec<CheckRecord>, CliError> {
    let records = run_checks(filter, &VerifyOptions { inject_fault });
    if records.is_empty() {
        return Err(CliError::Config(format!(
            "no check matches filter {:?}",
            filter.unwrap_or_default()
        )));
    }
    ensure_dir(out_dir)?;
    let report: Vec<_> = records
        .iter()
        .map(|r| {
            serde_json::json!({
                "name": r.name,
                "tolerance": r.tolerance,
                "observed": r.observed,
                "passed": r.passed,
                "error": r.error,
            })
        })
        .collect();
    write_json(&out_dir.join(REPORT_FILE), &report)?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_spans_the_clamped_interval() {
        let g = default_grid(1e-3, 11);
        assert_eq!(g.len(), 11);
        assert_eq!(g[0], 0.0);
        assert_eq!(*g.last().unwrap(), 1.0 - 1e-3);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn dump_coeffs_rejects_times_past_the_clamp() {
        let dir = tempfile::tempdir().unwrap();
        let err = cmd_dump_coeffs(2, 1.0, 1e-3, &[0.5, 0.9995], dir.path()).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
        let err = cmd_dump_coeffs(2, 1.0, 1e-3, &[-0.1], dir.path()).unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
    }
}
