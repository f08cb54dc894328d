//! Percentile bootstrap for the mean and the median.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Statistic {
    Mean,
    Median,
}

impl Statistic {
    pub fn compute(self, values: &[f64]) -> f64 {
        match self {
            Statistic::Mean => values.iter().sum::<f64>() / values.len() as f64,
            Statistic::Median => {
                let mut v = values.to_vec();
                v.sort_by(f64::total_cmp);
                let n = v.len();
                if n % 2 == 1 {
                    v[n / 2]
                } else {
                    (v[n / 2 - 1] + v[n / 2]) / 2.0
                }
            }
        }
    }
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Statistic::Mean => "mean",
            Statistic::Median => "median",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BootstrapResult {
    pub statistic: Statistic,
    pub point: f64,
    pub low: f64,
    pub high: f64,
    pub repetitions: usize,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// 95% percentile interval of `statistic` over `repetitions` resamples.
/// When the percentile interval misses the point estimate (possible for
/// skewed medians) it is stretched to include it.
pub fn bootstrap_ci<R: Rng + ?Sized>(
    values: &[f64],
    statistic: Statistic,
    repetitions: usize,
    rng: &mut R,
) -> Result<BootstrapResult> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if repetitions == 0 {
        return Err(Error::Config("bootstrap needs at least one repetition".into()));
    }
    let n = values.len();
    let mut sample = vec![0.0; n];
    let mut stats: Vec<f64> = (0..repetitions)
        .map(|_| {
            for s in sample.iter_mut() {
                *s = values[rng.gen_range(0..n)];
            }
            statistic.compute(&sample)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let point = statistic.compute(values);
    Ok(BootstrapResult {
        statistic,
        point,
        low: quantile(&stats, 0.025).min(point),
        high: quantile(&stats, 0.975).max(point),
        repetitions,
    })
}
