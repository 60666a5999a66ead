//! Gaussian-kernel maximum mean discrepancy.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{MetricsError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise Euclidean distance of the pooled sample.
    Median,
}

/// `k(x, y) = exp(-||x - y||^2 / (2 sigma^2))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub bandwidth: Bandwidth,
}

impl KernelSpec {
    pub fn gaussian(sigma: f64) -> Self {
        KernelSpec {
            bandwidth: Bandwidth::Fixed(sigma),
        }
    }

    pub fn median() -> Self {
        KernelSpec {
            bandwidth: Bandwidth::Median,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    /// V-statistic: all pairs, diagonal included.
    Biased,
    /// U-statistic: within-sample diagonals excluded.
    Unbiased,
}

fn sq_dist(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    a.row(i).iter().zip(b.row(j).iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median of the pairwise distances over `i < j` of the rows of `x` and
/// `y` pooled.
pub fn median_bandwidth(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    if x.ncols() != y.ncols() {
        return Err(MetricsError::DimensionMismatch(x.ncols(), y.ncols()));
    }
    let rows: Vec<_> = x.row_iter().chain(y.row_iter()).collect();
    let mut d = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push((&rows[i] - &rows[j]).norm());
        }
    }
    if d.is_empty() {
        return Err(MetricsError::InsufficientSamples { need: 2, got: rows.len() });
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let median = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
    if median <= 0.0 {
        return Err(MetricsError::InvalidBandwidth(median));
    }
    Ok(median)
}

/// Squared MMD between the row samples `x` and `y`:
/// `E k(x, x') + E k(y, y') - 2 E k(x, y)`, evaluated as explicit double sums.
pub fn mmd2(x: &DMatrix<f64>, y: &DMatrix<f64>, kernel: KernelSpec, estimator: Estimator) -> Result<f64> {
    if x.ncols() != y.ncols() {
        return Err(MetricsError::DimensionMismatch(x.ncols(), y.ncols()));
    }
    let (n, m) = (x.nrows(), y.nrows());
    let need = match estimator {
        Estimator::Biased => 1,
        Estimator::Unbiased => 2,
    };
    if n < need || m < need {
        return Err(MetricsError::InsufficientSamples { need, got: n.min(m) });
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    let sigma = match kernel.bandwidth {
        Bandwidth::Fixed(s) => s,
        Bandwidth::Median => median_bandwidth(x, y)?,
    };
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(MetricsError::InvalidBandwidth(sigma));
    }
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let k = |a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize| (-gamma * sq_dist(a, i, b, j)).exp();
    let within = |a: &DMatrix<f64>, len: usize| -> f64 {
        let mut s = 0.0;
        for i in 0..len {
            for j in 0..len {
                if estimator == Estimator::Unbiased && i == j {
                    continue;
                }
                s += k(a, i, a, j);
            }
        }
        match estimator {
            Estimator::Biased => s / (len * len) as f64,
            Estimator::Unbiased => s / (len * (len - 1)) as f64,
        }
    };
    let mut cross = 0.0;
    for i in 0..n {
        for j in 0..m {
            cross += k(x, i, y, j);
        }
    }
    Ok(within(x, n) + within(y, m) - 2.0 * cross / (n * m) as f64)
}
