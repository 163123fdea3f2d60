//! Small estimators shared by the Monte Carlo modules.

use serde::{Deserialize, Serialize};

/// A Monte Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

impl Estimate {
    pub fn new(value: f64, std_error: f64) -> Self {
        Self { value, std_error }
    }

    /// `|self - other| <= k * sqrt(se1^2 + se2^2) + slack`.
    pub fn agrees_with(&self, other: &Estimate, k: f64, slack: f64) -> bool {
        let combined = self.std_error.hypot(other.std_error);
        (self.value - other.value).abs() <= k * combined + slack
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

pub fn mean_se(xs: &[f64]) -> Estimate {
    let n = xs.len() as f64;
    Estimate::new(mean(xs), (variance(xs) / n).sqrt())
}

/// Ratio of means `sum(num) / sum(den)` with a delta-method standard error.
pub fn ratio_of_means(num: &[f64], den: &[f64]) -> Estimate {
    assert_eq!(num.len(), den.len());
    let n = num.len() as f64;
    let mx = mean(num);
    let my = mean(den);
    let r = mx / my;
    let resid: f64 = num
        .iter()
        .zip(den)
        .map(|(x, y)| {
            let e = x - r * y;
            e * e
        })
        .sum::<f64>()
        / (n - 1.0);
    Estimate::new(r, (resid / n).sqrt() / my.abs())
}

/// Kish effective sample size of a set of nonnegative weights.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    if s2 == 0.0 {
        0.0
    } else {
        s * s / s2
    }
}

/// Self-normalized estimate from log-weights, with delta-method SE and ESS.
pub fn snis(log_weights: &[f64], values: &[f64]) -> (Estimate, f64) {
    assert_eq!(log_weights.len(), values.len());
    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_weights.iter().map(|lw| (lw - max).exp()).collect();
    let wv: Vec<f64> = w.iter().zip(values).map(|(w, v)| w * v).collect();
    (ratio_of_means(&wv, &w), effective_sample_size(&w))
}

/// Integrated autocorrelation time with Sokal's adaptive window (c = 5).
pub fn integrated_autocorrelation_time(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 4 {
        return 1.0;
    }
    let m = mean(xs);
    let c0: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
    if c0 == 0.0 {
        return 1.0;
    }
    let mut tau = 1.0;
    for lag in 1..n / 2 {
        let c: f64 = xs[..n - lag]
            .iter()
            .zip(&xs[lag..])
            .map(|(a, b)| (a - m) * (b - m))
            .sum::<f64>()
            / n as f64;
        tau += 2.0 * c / c0;
        if lag as f64 >= 5.0 * tau {
            break;
        }
    }
    tau.max(1.0)
}

/// Batch-means standard error of the mean using `batches` equal batches.
pub fn batch_means_se(xs: &[f64], batches: usize) -> f64 {
    let size = xs.len() / batches;
    if size == 0 || batches < 2 {
        return f64::NAN;
    }
    let means: Vec<f64> = xs.chunks_exact(size).take(batches).map(mean).collect();
    (variance(&means) / batches as f64).sqrt()
}

/// Sample kurtosis `m4 / m2^2` (3 for a Gaussian).
pub fn kurtosis(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let n = xs.len() as f64;
    let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    m4 / (m2 * m2)
}

pub fn correlation(xs: &[f64], ys: &[f64]) -> f64 {
    let mx = mean(xs);
    let my = mean(ys);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Weighted least squares fit `y = a + b x`; returns `(a, b, se_b)`.
pub fn weighted_linear_fit(x: &[f64], y: &[f64], var_y: &[f64]) -> (f64, f64, f64) {
    let w: Vec<f64> = var_y.iter().map(|v| 1.0 / v).collect();
    let sw: f64 = w.iter().sum();
    let sx: f64 = w.iter().zip(x).map(|(w, x)| w * x).sum();
    let sy: f64 = w.iter().zip(y).map(|(w, y)| w * y).sum();
    let sxx: f64 = w.iter().zip(x).map(|(w, x)| w * x * x).sum();
    let sxy: f64 = w.iter().zip(x).zip(y).map(|((w, x), y)| w * x * y).sum();
    let det = sw * sxx - sx * sx;
    let b = (sw * sxy - sx * sy) / det;
    let a = (sxx * sy - sx * sxy) / det;
    (a, b, (sw / det).sqrt())
}

/// Log of the mean of `exp(log_terms)`, computed without overflow.
pub fn log_mean_exp(log_terms: &[f64]) -> f64 {
    let max = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = log_terms.iter().map(|l| (l - max).exp()).sum();
    max + (s / log_terms.len() as f64).ln()
}
