//! Empirical-quantile mapping of numeric columns onto a standard normal.

use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

/// Probabilities are clipped to `[PROB_CLIP, 1 - PROB_CLIP]` before inversion.
pub const PROB_CLIP: f64 = 1e-7;

/// Tie-breaking noise, relative to the column's standard deviation.
pub const DEFAULT_NOISE: f64 = 1e-3;

/// Monotone map fitted on training values.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileMap {
    references: Vec<f64>,
}

impl QuantileMap {
    pub fn references(&self) -> &[f64] {
        &self.references
    }

    /// Empirical CDF level of `x`: sorted position `i` of `n` sits at `(i + 0.5) / n`,
    /// linear in between, clamped to the extreme positions outside the range.
    pub fn probability(&self, x: f64) -> f64 {
        let r = &self.references;
        let n = r.len() as f64;
        let lo = r.partition_point(|&v| v < x);
        let hi = r.partition_point(|&v| v <= x);
        if lo < hi {
            // exact hit, possibly a run of ties: centre of the run
            return ((lo as f64 + 0.5) + (hi as f64 - 0.5)) / (2.0 * n);
        }
        if lo == 0 {
            return 0.5 / n;
        }
        if lo == r.len() {
            return (n - 0.5) / n;
        }
        let (a, b) = (r[lo - 1], r[lo]);
        ((lo - 1) as f64 + 0.5 + (x - a) / (b - a)) / n
    }

    pub fn apply(&self, x: f64) -> f64 {
        let p = self.probability(x).clamp(PROB_CLIP, 1.0 - PROB_CLIP);
        standard_normal().inverse_cdf(p)
    }
}

/// Per-column transform fitted on the training split.
#[derive(Debug, Clone, PartialEq)]
pub enum ColumnTransform {
    Quantile(QuantileMap),
    /// Fewer than two distinct training values: the column maps to 0.
    Constant,
}

impl ColumnTransform {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            ColumnTransform::Quantile(q) => q.apply(x),
            ColumnTransform::Constant => 0.0,
        }
    }
}

pub(crate) fn standard_normal() -> Normal {
    Normal::standard()
}

/// Fits the quantile map on `values`, adding Gaussian noise of standard deviation
/// `noise * std(values)` before sorting. Returns a warning when the column is constant.
pub fn fit_quantile_transform<R: Rng>(
    values: &[f64],
    noise: f64,
    rng: &mut R,
) -> (ColumnTransform, Option<String>) {
    let mut distinct = values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 {
        return (
            ColumnTransform::Constant,
            Some(format!(
                "column has {} distinct training value(s); mapped to constant 0",
                distinct.len()
            )),
        );
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let scale = noise * std;
    let mut references: Vec<f64> = values
        .iter()
        .map(|&v| {
            if scale > 0.0 {
                let z: f64 = rng.sample(StandardNormal);
                v + scale * z
            } else {
                v
            }
        })
        .collect();
    references.sort_by(f64::total_cmp);
    (ColumnTransform::Quantile(QuantileMap { references }), None)
}
