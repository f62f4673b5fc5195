//! Fit diagnostics: per-site discrepancy, quantiles, Kolmogorov–Smirnov and
//! Gelman–Rubin statistics.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// `1 - ||y - lambda|| / ||y||` for one site.
pub fn site_discrepancy(y: &[f64], lambda: &[f64]) -> Result<f64> {
    if y.len() != lambda.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} counts, {} means",
            y.len(),
            lambda.len()
        )));
    }
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if ny == 0.0 {
        return Err(Error::UndefinedStatistic("site has no reported cases".into()));
    }
    let nr = y.iter().zip(lambda).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(1.0 - nr / ny)
}

/// Per-site discrepancy over the rows of `y`; `None` where the site saw no cases.
pub fn discrepancy(y: &DMatrix<f64>, lambda: &DMatrix<f64>) -> Result<Vec<Option<f64>>> {
    if y.shape() != lambda.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} counts, {:?} means",
            y.shape(),
            lambda.shape()
        )));
    }
    Ok((0..y.nrows())
        .map(|s| {
            let ys: Vec<f64> = y.row(s).iter().copied().collect();
            let ls: Vec<f64> = lambda.row(s).iter().copied().collect();
            site_discrepancy(&ys, &ls).ok()
        })
        .collect())
}

/// Linearly interpolated sample quantile (`q` in `[0, 1]`) of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// One-sample Kolmogorov–Smirnov distance to `cdf`.
pub fn ks_statistic(values: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic 1% critical value of the KS distance for `n` samples.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.6276 / (n as f64).sqrt()
}

/// Potential scale reduction factor over equal-length chains.
pub fn gelman_rubin(chains: &[Vec<f64>]) -> Result<f64> {
    let m = chains.len();
    if m < 2 {
        return Err(Error::UndefinedStatistic("need at least two chains".into()));
    }
    let n = chains[0].len();
    if n < 2 || chains.iter().any(|c| c.len() != n) {
        return Err(Error::UndefinedStatistic(
            "chains must share a length of at least two".into(),
        ));
    }
    let means: Vec<f64> = chains.iter().map(|c| c.iter().sum::<f64>() / n as f64).collect();
    let grand = means.iter().sum::<f64>() / m as f64;
    let b = n as f64 / (m - 1) as f64 * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1) as f64)
        .sum::<f64>()
        / m as f64;
    if w == 0.0 {
        return Ok(if b == 0.0 { 1.0 } else { f64::INFINITY });
    }
    let var = (n - 1) as f64 / n as f64 * w + b / n as f64;
    Ok((var / w).sqrt())
}
