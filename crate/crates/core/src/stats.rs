//! Rank correlation and bootstrap intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Average ranks (1-based); ties share the mean of their positions.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Pearson correlation; `None` if either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let mx = crate::linalg::mean(x);
    let my = crate::linalg::mean(y);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Spearman rank correlation with tie correction.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(invalid("spearman needs equal-length inputs"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(invalid("spearman needs finite inputs"));
    }
    pearson(&ranks(x), &ranks(y)).ok_or_else(|| invalid("spearman undefined for constant or short input"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Percentile bootstrap interval for a statistic of paired samples.
pub fn bootstrap_ci(
    x: &[f64],
    y: &[f64],
    stat: impl Fn(&[f64], &[f64]) -> Result<f64>,
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<Interval> {
    if !(level > 0.0 && level < 1.0) || resamples == 0 {
        return Err(invalid("bootstrap needs 0 < level < 1 and resamples > 0"));
    }
    let estimate = stat(x, y)?;
    let n = x.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(resamples);
    let (mut bx, mut by) = (vec![0.0; n], vec![0.0; n]);
    for _ in 0..resamples {
        for i in 0..n {
            let j = rng.random_range(0..n);
            bx[i] = x[j];
            by[i] = y[j];
        }
        // degenerate resamples (all ties) are skipped
        if let Ok(v) = stat(&bx, &by) {
            values.push(v);
        }
    }
    if values.is_empty() {
        return Err(invalid("every bootstrap resample was degenerate"));
    }
    values.sort_by(f64::total_cmp);
    let q = |p: f64| values[((p * (values.len() - 1) as f64).round() as usize).min(values.len() - 1)];
    let alpha = (1.0 - level) / 2.0;
    Ok(Interval { estimate, lo: q(alpha), hi: q(1.0 - alpha) })
}

/// Percentile bootstrap interval for the mean of `xs`.
pub fn bootstrap_mean_ci(xs: &[f64], resamples: usize, level: f64, seed: u64) -> Result<Interval> {
    if xs.is_empty() {
        return Err(invalid("bootstrap needs at least one sample"));
    }
    bootstrap_ci(xs, xs, |a, _| Ok(crate::linalg::mean(a)), resamples, level, seed)
}
