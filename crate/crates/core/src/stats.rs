//! Monte Carlo reductions.
//!
//! Reductions run sequentially over per-path values stored in path order, so a
//! fixed seed and path count give identical results for any thread count.

use serde::{Deserialize, Serialize};

/// Point estimate with its standard error (`se == 0` for exact values).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { value, se: 0.0 }
    }

    /// `|value - target|` measured in standard errors; infinite when `se == 0`
    /// and the gap is non-zero.
    pub fn z_score(&self, target: f64) -> f64 {
        let gap = (self.value - target).abs();
        if gap == 0.0 {
            0.0
        } else if self.se > 0.0 {
            gap / self.se
        } else {
            f64::INFINITY
        }
    }

    pub fn within(&self, target: f64, n_se: f64) -> bool {
        (self.value - target).abs() <= n_se * self.se
    }
}

/// Pairwise (cascade) summation.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 64;
    if xs.len() <= BLOCK {
        xs.iter().sum()
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(xs) / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let sq: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
    pairwise_sum(&sq) / (n - 1) as f64
}

/// Sample mean with standard error `s / sqrt(N)`.
pub fn mean_se(xs: &[f64]) -> Estimate {
    let n = xs.len();
    Estimate {
        value: mean(xs),
        se: if n < 2 { 0.0 } else { (variance(xs) / n as f64).sqrt() },
    }
}

pub fn covariance(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let mx = mean(xs);
    let my = mean(ys);
    let prod: Vec<f64> = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).collect();
    pairwise_sum(&prod) / (n - 1) as f64
}

pub fn correlation(xs: &[f64], ys: &[f64]) -> f64 {
    let vx = variance(xs);
    let vy = variance(ys);
    if vx <= 0.0 || vy <= 0.0 {
        return 0.0;
    }
    covariance(xs, ys) / (vx * vy).sqrt()
}

/// Sample variance with the standard error of the variance estimator, using
/// the fourth central moment: `Var(s^2) ~ (m4 - s^4) / N`.
pub fn variance_se(xs: &[f64]) -> Estimate {
    let n = xs.len() as f64;
    let m = mean(xs);
    let s2 = variance(xs);
    let q: Vec<f64> = xs.iter().map(|x| (x - m).powi(4)).collect();
    let m4 = pairwise_sum(&q) / n;
    Estimate {
        value: s2,
        se: ((m4 - s2 * s2).max(0.0) / n).sqrt(),
    }
}

/// Running column sums for estimating many means at once from i.i.d. rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnAcc {
    pub n: usize,
    pub sum: Vec<f64>,
    pub sumsq: Vec<f64>,
}

impl ColumnAcc {
    pub fn new(cols: usize) -> Self {
        Self {
            n: 0,
            sum: vec![0.0; cols],
            sumsq: vec![0.0; cols],
        }
    }

    pub fn push(&mut self, row: &[f64]) {
        self.n += 1;
        for ((s, q), x) in self.sum.iter_mut().zip(self.sumsq.iter_mut()).zip(row) {
            *s += x;
            *q += x * x;
        }
    }

    pub fn merge(&mut self, other: &ColumnAcc) {
        self.n += other.n;
        for (a, b) in self.sum.iter_mut().zip(&other.sum) {
            *a += b;
        }
        for (a, b) in self.sumsq.iter_mut().zip(&other.sumsq) {
            *a += b;
        }
    }

    pub fn mean(&self, k: usize) -> f64 {
        self.sum[k] / self.n as f64
    }

    pub fn estimate(&self, k: usize) -> Estimate {
        let n = self.n as f64;
        let m = self.sum[k] / n;
        let var = if self.n > 1 {
            ((self.sumsq[k] - n * m * m) / (n - 1.0)).max(0.0)
        } else {
            0.0
        };
        Estimate {
            value: m,
            se: (var / n).sqrt(),
        }
    }
}
