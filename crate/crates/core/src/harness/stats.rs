//! Summary statistics for replicated experiments.

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::linalg::std_normal_cdf;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of trial `index`: a hash of `(base_seed, index)`.
pub fn trial_seed(base_seed: u64, index: usize) -> u64 {
    splitmix64(splitmix64(base_seed) ^ (index as u64))
}

/// Exact (Clopper–Pearson) two-sided interval for a binomial proportion.
pub fn clopper_pearson(hits: usize, trials: usize, level: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let a = 1.0 - level;
    let (k, n) = (hits as f64, trials as f64);
    let lower = if hits == 0 { 0.0 } else { beta_inverse(a / 2.0, k, n - k + 1.0) };
    let upper = if hits == trials { 1.0 } else { beta_inverse(1.0 - a / 2.0, k + 1.0, n - k) };
    (lower, upper)
}

/// Inverse of the regularized incomplete beta function by bisection.
fn beta_inverse(q: f64, a: f64, b: f64) -> f64 {
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if beta_reg(a, b, mid) < q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Kolmogorov–Smirnov distance between the empirical law of `values` and N(0, 1).
pub fn ks_standard_normal(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter().enumerate().fold(0.0_f64, |d, (i, &x)| {
        let c = std_normal_cdf(x);
        d.max((i as f64 + 1.0) / n - c).max(c - i as f64 / n)
    })
}

/// Sample moments and normality distance of one error coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub n: usize,
    pub mean: f64,
    /// Unbiased sample variance.
    pub variance: f64,
    pub ks: f64,
}

impl Moments {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let m = mean(values);
        let variance = if n > 1 {
            values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n as f64 - 1.0)
        } else {
            f64::NAN
        };
        Self { n, mean: m, variance, ks: if n > 0 { ks_standard_normal(values) } else { f64::NAN } }
    }
}

/// Fixed-range histogram with under- and overflow counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Self {
        assert!(lo < hi && bins > 0, "histogram needs lo < hi and at least one bin");
        Self { lo, hi, counts: vec![0; bins], underflow: 0, overflow: 0 }
    }

    pub fn add(&mut self, v: f64) {
        if v < self.lo || v.is_nan() {
            self.underflow += 1;
        } else if v >= self.hi {
            self.overflow += 1;
        } else {
            let bins = self.counts.len();
            let i = (((v - self.lo) / (self.hi - self.lo)) * bins as f64) as usize;
            self.counts[i.min(bins - 1)] += 1;
        }
    }

    pub fn from_values(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let mut h = Self::new(lo, hi, bins);
        values.iter().for_each(|&v| h.add(v));
        h
    }

    pub fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lo + (i as f64 + 0.5) * self.bin_width()
    }

    /// Probability density of the counts, normalized by the total including
    /// out-of-range values.
    pub fn density(&self) -> Vec<f64> {
        let total = self.counts.iter().sum::<u64>() + self.underflow + self.overflow;
        let scale = if total == 0 { 0.0 } else { 1.0 / (total as f64 * self.bin_width()) };
        self.counts.iter().map(|&c| c as f64 * scale).collect()
    }
}
