//! Dataset quality measures: distance to a uniform law via sorted quantiles,
//! coefficient of variation of category counts, Q–Q pairs and histograms.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("dimension {dim} has {len} values, need at least {needed}")]
    TooFewValues { dim: usize, len: usize, needed: usize },
    #[error("dimension {dim} has degenerate bounds [{lo}, {hi}]")]
    DegenerateBounds { dim: usize, lo: f64, hi: f64 },
    #[error("expected {expected} bound pairs, got {found}")]
    BoundsMismatch { expected: usize, found: usize },
    #[error("empty histogram")]
    EmptyHistogram,
    #[error("value {value} outside 0..={max}")]
    OutOfRange { value: i64, max: usize },
}

/// One row of the metrics time series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsPoint {
    pub step: u64,
    #[serde(rename = "N")]
    pub n: u64,
    pub delta_uni: Option<f64>,
    pub cv: Option<f64>,
    pub acceptance_rate: f64,
}

/// Per-dimension `(lo, hi)` normalization bounds.
pub type Bounds = (f64, f64);

fn check(columns: &[impl AsRef<[f64]>], bounds: &[Bounds], needed: usize) -> Result<(), MetricsError> {
    if columns.len() != bounds.len() || columns.is_empty() {
        return Err(MetricsError::BoundsMismatch {
            expected: columns.len(),
            found: bounds.len(),
        });
    }
    for (dim, (col, &(lo, hi))) in columns.iter().zip(bounds).enumerate() {
        let len = col.as_ref().len();
        if len < needed {
            return Err(MetricsError::TooFewValues { dim, len, needed });
        }
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(MetricsError::DegenerateBounds { dim, lo, hi });
        }
    }
    Ok(())
}

#[inline]
fn midpoint_quantile(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64
}

#[inline]
fn normalize(v: f64, (lo, hi): Bounds) -> f64 {
    ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
}

/// RMSE of one already sorted column against the midpoint uniform quantiles.
fn column_rmse_sq(sorted: &[f64], bounds: Bounds) -> f64 {
    let n = sorted.len();
    sorted
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let e = normalize(v, bounds) - midpoint_quantile(i, n);
            e * e
        })
        .sum::<f64>()
        / n as f64
}

/// Uniformity error over columns that are already sorted ascending.
pub fn delta_uni_sorted(columns: &[impl AsRef<[f64]>], bounds: &[Bounds]) -> Result<f64, MetricsError> {
    check(columns, bounds, 2)?;
    let sum: f64 = columns
        .iter()
        .zip(bounds)
        .map(|(c, &b)| column_rmse_sq(c.as_ref(), b))
        .sum();
    Ok((sum / columns.len() as f64).sqrt())
}

/// Uniformity error `Δ = √(1/d Σ_j r_j²)` with `r_j` the RMSE between the
/// sorted normalized values of dimension `j` and `p_i = (i − ½)/n`.
///
/// Normalized values are clamped to `[0, 1]`, so anything outside the bounds
/// counts as saturated and `Δ` stays in `[0, 1]`.
pub fn delta_uni(columns: &[impl AsRef<[f64]>], bounds: &[Bounds]) -> Result<f64, MetricsError> {
    check(columns, bounds, 2)?;
    let sorted: Vec<Vec<f64>> = columns.iter().map(|c| sorted_copy(c.as_ref())).collect();
    delta_uni_sorted(&sorted, bounds)
}

/// `(p_i, u_i)` pairs per dimension, ready for plotting.
pub fn qq_points(columns: &[impl AsRef<[f64]>], bounds: &[Bounds]) -> Result<Vec<Vec<(f64, f64)>>, MetricsError> {
    check(columns, bounds, 2)?;
    Ok(columns
        .iter()
        .zip(bounds)
        .map(|(c, &b)| {
            let sorted = sorted_copy(c.as_ref());
            let n = sorted.len();
            sorted
                .iter()
                .enumerate()
                .map(|(i, &v)| (midpoint_quantile(i, n), normalize(v, b)))
                .collect()
        })
        .collect())
}

/// Empirical `(min, max)` per column.
pub fn empirical_bounds(columns: &[impl AsRef<[f64]>]) -> Vec<Bounds> {
    columns
        .iter()
        .map(|c| {
            c.as_ref()
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
        })
        .collect()
}

fn sorted_copy(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Coefficient of variation `σ/μ` of per-category counts (population σ).
/// Zero means perfectly balanced.
pub fn cv(counts: &[u64]) -> Result<f64, MetricsError> {
    let total: u64 = counts.iter().sum();
    if counts.len() < 2 || total == 0 {
        return Err(MetricsError::EmptyHistogram);
    }
    let k = counts.len() as f64;
    let mean = total as f64 / k;
    let var = counts
        .iter()
        .map(|&c| {
            let e = c as f64 - mean;
            e * e
        })
        .sum::<f64>()
        / k;
    Ok(var.sqrt() / mean)
}

/// Tally of values into categories `0..=max`.
pub fn histogram(values: &[i64], max: usize) -> Result<Vec<u64>, MetricsError> {
    let mut counts = vec![0u64; max + 1];
    for &v in values {
        let slot = usize::try_from(v)
            .ok()
            .filter(|&s| s <= max)
            .ok_or(MetricsError::OutOfRange { value: v, max })?;
        counts[slot] += 1;
    }
    Ok(counts)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_metrics_csv<W: Write>(series: &[MetricsPoint], mut out: W) -> io::Result<()> {
    writeln!(out, "step,N,delta_uni,cv,acceptance_rate")?;
    for p in series {
        writeln!(
            out,
            "{},{},{},{},{}",
            p.step,
            p.n,
            opt(p.delta_uni),
            opt(p.cv),
            p.acceptance_rate
        )?;
    }
    out.flush()
}

pub fn write_qq_csv<W: Write>(points: &[Vec<(f64, f64)>], mut out: W) -> io::Result<()> {
    writeln!(out, "dim,p,u")?;
    for (dim, col) in points.iter().enumerate() {
        for (p, u) in col {
            writeln!(out, "{dim},{p},{u}")?;
        }
    }
    out.flush()
}

pub fn write_histogram_csv<W: Write>(counts: &[u64], mut out: W) -> io::Result<()> {
    writeln!(out, "category,count")?;
    for (c, n) in counts.iter().enumerate() {
        writeln!(out, "{c},{n}")?;
    }
    out.flush()
}
