//! Small statistics toolkit for convergence studies.
//!
//! Rate verification works on data of the form `(εᵣ, E[Yᵣ])` where the
//! expectation is an average over independent seeds. The tools here are:
//!
//! - ordinary least squares on `log E[Y]` vs `log ε` giving the empirical
//!   order (slope);
//! - a seed-level bootstrap: resample the per-seed averages with
//!   replacement, refit the slope, and report percentile confidence
//!   intervals — this respects the fact that the same seed is correlated
//!   across ε values under common random numbers;
//! - strict-monotonicity checks used by vanishing-ratio diagnostics.

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Sample mean.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance (denominator n−1); zero for n < 2.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Standard error of the sample mean, `√(var/n)`.
pub fn standard_error(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    (variance(xs) / xs.len() as f64).sqrt()
}

/// Result of a least-squares line fit.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct SlopeFit {
    /// Fitted slope.
    pub slope: f64,
    /// Fitted intercept.
    pub intercept: f64,
    /// Coefficient of determination of the fit.
    pub r_squared: f64,
}

/// Ordinary least squares of `ys` on `xs`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<SlopeFit> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            context: "linear_fit",
            expected: xs.len(),
            actual: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::domain("linear_fit", "need at least two points"));
    }
    let n = xs.len() as f64;
    let mx = mean(xs);
    let my = mean(ys);
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx <= 0.0 {
        return Err(Error::domain("linear_fit", "degenerate abscissae (zero spread)"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let e = y - (intercept + slope * x);
            e * e
        })
        .sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    let _ = n;
    Ok(SlopeFit {
        slope,
        intercept,
        r_squared,
    })
}

/// Least-squares slope of `log y` against `log x`; all entries must be
/// strictly positive.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Result<SlopeFit> {
    for &x in xs {
        if !(x > 0.0) {
            return Err(Error::domain("log_log_slope", format!("non-positive abscissa {x}")));
        }
    }
    for &y in ys {
        if !(y > 0.0) {
            return Err(Error::domain("log_log_slope", format!("non-positive ordinate {y}")));
        }
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    linear_fit(&lx, &ly)
}

/// Two-sided percentile bootstrap interval for a statistic of seed-level
/// data.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct BootstrapInterval {
    /// The statistic on the full sample.
    pub point: f64,
    /// Lower percentile bound.
    pub lo: f64,
    /// Upper percentile bound.
    pub hi: f64,
    /// Confidence level used (e.g. 0.90).
    pub level: f64,
    /// Number of bootstrap resamples drawn.
    pub resamples: usize,
}

/// Percentile of an unsorted sample (linear interpolation between order
/// statistics), `q ∈ [0, 1]`.
pub fn percentile(xs: &[f64], q: f64) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if s.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (s.len() as f64 - 1.0);
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        s[lo]
    } else {
        let w = pos - lo as f64;
        s[lo] * (1.0 - w) + s[hi] * w
    }
}

/// Seed-level bootstrap of a log-log slope.
///
/// `per_seed` holds one row per seed, each row the values at the common grid
/// `xs` (so rows are correlated across columns; resampling whole rows keeps
/// that structure). Rows are resampled with replacement, column means are
/// recomputed, and the slope of `log(mean)` vs `log(x)` is refit.
pub fn bootstrap_log_log_slope(
    xs: &[f64],
    per_seed: &[Vec<f64>],
    level: f64,
    resamples: usize,
    stream: &mut RngStream,
) -> Result<BootstrapInterval> {
    if per_seed.is_empty() {
        return Err(Error::domain("bootstrap_log_log_slope", "no seed rows"));
    }
    for row in per_seed {
        if row.len() != xs.len() {
            return Err(Error::DimensionMismatch {
                context: "bootstrap_log_log_slope",
                expected: xs.len(),
                actual: row.len(),
            });
        }
    }
    let n_seeds = per_seed.len();
    let columns_mean = |rows: &[usize]| -> Vec<f64> {
        let mut m = vec![0.0; xs.len()];
        for &r in rows {
            for (k, v) in per_seed[r].iter().enumerate() {
                m[k] += v;
            }
        }
        for v in m.iter_mut() {
            *v /= rows.len() as f64;
        }
        m
    };
    let full: Vec<usize> = (0..n_seeds).collect();
    let point = log_log_slope(xs, &columns_mean(&full))?.slope;

    let mut slopes = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let rows: Vec<usize> = (0..n_seeds).map(|_| stream.uniform_index(n_seeds)).collect();
        let m = columns_mean(&rows);
        if m.iter().all(|&v| v > 0.0) {
            slopes.push(log_log_slope(xs, &m)?.slope);
        }
    }
    if slopes.len() < resamples / 2 {
        return Err(Error::numerical(
            "bootstrap_log_log_slope",
            "too many degenerate resamples (non-positive column means)",
        ));
    }
    let alpha = (1.0 - level) / 2.0;
    Ok(BootstrapInterval {
        point,
        lo: percentile(&slopes, alpha),
        hi: percentile(&slopes, 1.0 - alpha),
        level,
        resamples,
    })
}

/// Seed-level bootstrap standard error of a column mean: resample rows,
/// recompute the mean of column `col`, report the standard deviation of the
/// resampled means.
pub fn bootstrap_mean_se(
    per_seed: &[f64],
    resamples: usize,
    stream: &mut RngStream,
) -> f64 {
    let n = per_seed.len();
    if n < 2 {
        return 0.0;
    }
    let mut means = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let mut acc = 0.0;
        for _ in 0..n {
            acc += per_seed[stream.uniform_index(n)];
        }
        means.push(acc / n as f64);
    }
    variance(&means).sqrt()
}

/// True when the sequence is strictly decreasing.
pub fn strictly_decreasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] < w[0])
}
