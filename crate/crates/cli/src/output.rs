use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use image::{Rgb, RgbImage};
use nalgebra::DVector;
use serde::Serialize;
use tada_core::sampler::TrajectoryPoint;

use crate::CliError;

pub const SCATTER_SIZE: u32 = 512;

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Shortest round-trip text for `x`, switching to exponent form for very
/// small or large magnitudes; byte-stable for bit-identical inputs.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}

/// Buffered CSV writer.
pub struct CsvWriter {
    out: BufWriter<File>,
    path: std::path::PathBuf,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &[String]) -> Result<Self, CliError> {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        let mut w = Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        };
        w.line(header.iter().map(String::as_str))?;
        Ok(w)
    }

    pub fn line<'a>(&mut self, cells: impl IntoIterator<Item = &'a str>) -> Result<(), CliError> {
        let row: Vec<&str> = cells.into_iter().collect();
        writeln!(self.out, "{}", row.join(",")).map_err(|e| CliError::io(&self.path, e))
    }

    pub fn row(&mut self, cells: &[String]) -> Result<(), CliError> {
        self.line(cells.iter().map(String::as_str))
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.out.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

pub fn indexed(prefix: &str, count: usize) -> impl Iterator<Item = String> + '_ {
    (0..count).map(move |i| format!("{prefix}_{i}"))
}

pub fn cells(v: &DVector<f64>) -> impl Iterator<Item = String> + '_ {
    v.iter().map(|&x| num(x))
}

/// `sample_id, dim_0, …, dim_{d-1}`.
pub fn write_samples(path: &Path, samples: &[DVector<f64>]) -> Result<(), CliError> {
    let d = samples.first().map_or(0, |s| s.len());
    let header: Vec<String> = std::iter::once("sample_id".to_string())
        .chain(indexed("dim", d))
        .collect();
    let mut w = CsvWriter::create(path, &header)?;
    for (i, s) in samples.iter().enumerate() {
        let row: Vec<String> = std::iter::once(i.to_string()).chain(cells(s)).collect();
        w.row(&row)?;
    }
    w.finish()
}

/// `sample_id, step, t, y_*, x_hat_*`: the denoiser input and output at each
/// evaluation.
pub fn write_trajectories(
    path: &Path,
    trajectories: &[Vec<TrajectoryPoint>],
) -> Result<(), CliError> {
    let d = trajectories
        .first()
        .and_then(|t| t.first())
        .map_or(0, |p| p.y.len());
    let header: Vec<String> = ["sample_id", "step", "t"]
        .iter()
        .map(|s| s.to_string())
        .chain(indexed("y", d))
        .chain(indexed("x_hat", d))
        .collect();
    let mut w = CsvWriter::create(path, &header)?;
    for (i, traj) in trajectories.iter().enumerate() {
        for (step, p) in traj.iter().enumerate() {
            let row: Vec<String> = [i.to_string(), step.to_string(), num(p.t)]
                .into_iter()
                .chain(cells(&p.y))
                .chain(cells(&p.x_hat))
                .collect();
            w.row(&row)?;
        }
    }
    w.finish()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Output(format!("serialising {}: {e}", path.display())))?;
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

/// Scatter of the first two coordinates on a square canvas centred at the
/// origin. One-dimensional data is plotted against a zero ordinate.
pub fn scatter_image(samples: &[DVector<f64>]) -> RgbImage {
    let size = SCATTER_SIZE;
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let coord = |s: &DVector<f64>, i: usize| if i < s.len() { s[i] } else { 0.0 };
    let extent = samples
        .iter()
        .flat_map(|s| [coord(s, 0).abs(), coord(s, 1).abs()])
        .filter(|v| v.is_finite())
        .fold(0.0_f64, f64::max)
        .max(1e-9)
        * 1.05;
    let axis = size / 2;
    for i in 0..size {
        img.put_pixel(i, axis, Rgb([220, 220, 220]));
        img.put_pixel(axis, i, Rgb([220, 220, 220]));
    }
    let to_pixel = |v: f64| ((v / extent + 1.0) * 0.5 * (size - 1) as f64).round();
    for s in samples {
        let (px, py) = (to_pixel(coord(s, 0)), to_pixel(-coord(s, 1)));
        if !(px.is_finite() && py.is_finite()) {
            continue;
        }
        let (px, py) = (px as i64, py as i64);
        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            let (x, y) = (px + dx, py + dy);
            if (0..size as i64).contains(&x) && (0..size as i64).contains(&y) {
                img.put_pixel(x as u32, y as u32, Rgb([30, 60, 160]));
            }
        }
    }
    img
}

/// Plots are best effort: a failure is reported and does not fail the run.
pub fn write_scatter(path: &Path, samples: &[DVector<f64>]) {
    if let Err(e) = scatter_image(samples).save(path) {
        eprintln!("warning: scatter plot {} not written: {e}", path.display());
    }
}
