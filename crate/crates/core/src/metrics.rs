//! Sample-based distances between point clouds and a diversity measure.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::rng::{standard_normal, stream};

/// Cap on the batch size used by [`energy_distance`] (quadratic cost).
pub const ENERGY_SUBSAMPLE_CAP: usize = 4096;

/// A labelled, nonempty batch of equal-dimension samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    samples: Vec<DVector<f64>>,
    label: String,
}

impl SampleBatch {
    pub fn new(samples: Vec<DVector<f64>>, label: impl Into<String>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Precondition("sample batch is empty".into()))?;
        let d = first.len();
        if let Some(bad) = samples.iter().find(|s| s.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: bad.len(),
            });
        }
        Ok(Self {
            samples,
            label: label.into(),
        })
    }

    pub fn samples(&self) -> &[DVector<f64>] {
        &self.samples
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn dim(&self) -> usize {
        self.samples[0].len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn same_dim(a: &SampleBatch, b: &SampleBatch) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(())
}

/// Squared 2-Wasserstein distance between two 1-D empirical measures with
/// uniform weights, via the quantile functions.
pub fn wasserstein2_sq_1d(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut total = 0.0;
    // walk the merged quantile breakpoints i/n and j/m
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        let diff = a[i] - b[j];
        total += (next - u) * diff * diff;
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    total
}

/// Sliced 2-Wasserstein distance: root of the mean squared 1-D distance over
/// `projections` random unit directions drawn from `seed`.
pub fn sliced_wasserstein2(
    a: &SampleBatch,
    b: &SampleBatch,
    projections: usize,
    seed: u64,
) -> Result<f64> {
    same_dim(a, b)?;
    if projections == 0 {
        return Err(Error::Precondition("projections must be at least 1".into()));
    }
    let d = a.dim();
    let mut rng = stream(seed, 0);
    let mut total = 0.0;
    for _ in 0..projections {
        let dir = loop {
            let v = DVector::from_fn(d, |_, _| standard_normal(&mut rng));
            let norm = v.norm();
            if norm > 0.0 {
                break v / norm;
            }
        };
        let pa: Vec<f64> = a.samples().iter().map(|s| s.dot(&dir)).collect();
        let pb: Vec<f64> = b.samples().iter().map(|s| s.dot(&dir)).collect();
        total += wasserstein2_sq_1d(&pa, &pb);
    }
    Ok((total / projections as f64).sqrt())
}

/// Evenly strided subsample of at most `cap` points.
fn strided(samples: &[DVector<f64>], cap: usize) -> Vec<&DVector<f64>> {
    let n = samples.len();
    if n <= cap {
        return samples.iter().collect();
    }
    (0..cap).map(|i| &samples[i * n / cap]).collect()
}

fn mean_distance(a: &[&DVector<f64>], b: &[&DVector<f64>]) -> f64 {
    let total: f64 = a
        .iter()
        .map(|x| b.iter().map(|y| (*x - *y).norm()).sum::<f64>())
        .sum();
    total / (a.len() * b.len()) as f64
}

/// Energy distance `2 E|X - Y| - E|X - X'| - E|Y - Y'|` (V-statistic), each
/// batch strided down to [`ENERGY_SUBSAMPLE_CAP`] points.
pub fn energy_distance(a: &SampleBatch, b: &SampleBatch) -> Result<f64> {
    same_dim(a, b)?;
    let xa = strided(a.samples(), ENERGY_SUBSAMPLE_CAP);
    let xb = strided(b.samples(), ENERGY_SUBSAMPLE_CAP);
    let value = 2.0 * mean_distance(&xa, &xb) - mean_distance(&xa, &xa) - mean_distance(&xb, &xb);
    Ok(value.max(0.0))
}

/// Mean pairwise Euclidean distance within each group.
pub fn diversity_spread(groups: &[SampleBatch]) -> Result<Vec<f64>> {
    groups
        .iter()
        .map(|g| {
            let s = g.samples();
            if s.len() < 2 {
                return Err(Error::Precondition(format!(
                    "group '{}' needs at least 2 samples",
                    g.label()
                )));
            }
            let mut total = 0.0;
            for i in 0..s.len() {
                for j in i + 1..s.len() {
                    total += (&s[i] - &s[j]).norm();
                }
            }
            Ok(total / (s.len() * (s.len() - 1) / 2) as f64)
        })
        .collect()
}
