//! The tilt `lambda(alpha)` solving `q(lambda) = 1`, and the deterministic
//! Lyapunov inequalities used to bound the cluster functional.
//!
//! `q(lambda) = E[exp(-lambda (sigma* + gap)) F(xi)]` with the gap
//! exponential of rate `alpha`, so the gap factor is `alpha / (alpha + lambda)`.
//! Estimates are formed on a fixed pool of clusters with their `F` estimates
//! (common random numbers), which makes `q` exactly monotone in `lambda`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster_process::{sample_cluster_terminal, ActivePeriod};
use crate::error::{invalid, require_positive, Error, Result};
use crate::gaussian_cluster::{estimate_f_unchecked, log_f_lower_bound};
use crate::stats::Estimate;
use crate::streams::{Purpose, RandomStreams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolOptions {
    /// Importance samples per cluster for `F`.
    pub f_samples: usize,
    /// Clusters with more intervals use the certified lower bound
    /// `prod sqrt(2/pi) tau_i^{-1/2}` instead of an `F` estimate.
    pub exact_size_limit: usize,
}

impl Default for PoolOptions {
    fn default() -> Self {
        Self { f_samples: 8, exact_size_limit: 256 }
    }
}

/// Summary of pool entry `j`; the cluster itself is regenerated on demand
/// from its stream by [`ClusterPool::cluster`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub sigma_star: f64,
    pub n: usize,
    pub log_f: f64,
    /// False when `log_f` is the lower bound rather than an estimate.
    pub exact: bool,
}

/// Clusters drawn on streams `(seed, ClusterPool, j)` with `F` estimates on
/// `(seed, ClusterWeights, j)`. Pools for different horizons built from the
/// same seed are coupled entry by entry.
#[derive(Debug, Clone)]
pub struct ClusterPool {
    alpha: f64,
    remaining: f64,
    streams: RandomStreams,
    options: PoolOptions,
    entries: Vec<PoolEntry>,
}

fn pool_entry(
    alpha: f64,
    remaining: f64,
    streams: &RandomStreams,
    options: &PoolOptions,
    j: u64,
) -> Result<PoolEntry> {
    let cluster = sample_cluster_terminal(alpha, remaining, &mut streams.stream(Purpose::ClusterPool, j))?;
    let (sigma_star, n) = (cluster.sigma_star(), cluster.n());
    if n > options.exact_size_limit {
        let log_f = log_f_lower_bound(&cluster);
        return Ok(PoolEntry { sigma_star, n, log_f, exact: false });
    }
    let mut rng = streams.stream(Purpose::ClusterWeights, j);
    let f = estimate_f_unchecked(&cluster, options.f_samples, &mut rng)?;
    Ok(PoolEntry { sigma_star, n, log_f: f.log_estimate, exact: true })
}

/// Weighted mean `sum_j c_j exp(l_j)` / N in a shifted form, with its SE.
fn shifted_mean(log_terms: &[f64], coef: impl Fn(usize) -> f64) -> (f64, f64, f64) {
    let n = log_terms.len() as f64;
    let shift = log_terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut s, mut s2) = (0.0, 0.0);
    for (j, l) in log_terms.iter().enumerate() {
        let v = coef(j) * (l - shift).exp();
        s += v;
        s2 += v * v;
    }
    let m = s / n;
    let var = if n > 1.0 { (s2 / n - m * m).max(0.0) * n / (n - 1.0) } else { 0.0 };
    (shift, m, (var / n).sqrt())
}

impl ClusterPool {
    /// Pool under the free law.
    pub fn build(alpha: f64, size: usize, options: PoolOptions, streams: &RandomStreams) -> Result<Self> {
        Self::build_terminal(alpha, f64::INFINITY, size, options, streams)
    }

    /// Pool under the terminal-time law with `remaining` time left.
    pub fn build_terminal(
        alpha: f64,
        remaining: f64,
        size: usize,
        options: PoolOptions,
        streams: &RandomStreams,
    ) -> Result<Self> {
        require_positive("alpha", alpha)?;
        if options.f_samples == 0 {
            return Err(invalid("f_samples", "must be at least 1"));
        }
        let mut pool = Self { alpha, remaining, streams: *streams, options, entries: Vec::new() };
        pool.grow_to(size)?;
        Ok(pool)
    }

    pub fn grow_to(&mut self, size: usize) -> Result<()> {
        let start = self.entries.len();
        if size <= start {
            return Ok(());
        }
        let (alpha, remaining, streams, options) = (self.alpha, self.remaining, self.streams, self.options);
        let fresh: Vec<PoolEntry> = (start..size)
            .into_par_iter()
            .map(|j| pool_entry(alpha, remaining, &streams, &options, j as u64))
            .collect::<Result<_>>()?;
        self.entries.extend(fresh);
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    /// Regenerates the cluster of entry `j`.
    pub fn cluster(&self, j: usize) -> Result<ActivePeriod> {
        let mut rng = self.streams.stream(Purpose::ClusterPool, j as u64);
        sample_cluster_terminal(self.alpha, self.remaining, &mut rng)
    }

    /// Number of entries carrying the lower bound instead of an estimate.
    pub fn bounded_count(&self) -> usize {
        self.entries.iter().filter(|e| !e.exact).count()
    }

    /// `ln(exp(-lambda sigma*) F)` per entry.
    pub fn log_tilted_weights(&self, lambda: f64) -> Vec<f64> {
        self.entries.iter().map(|e| e.log_f - lambda * e.sigma_star).collect()
    }

    /// Pool estimate of `E[exp(-lambda sigma*) F]`, without the gap factor.
    pub fn tilted_mean(&self, lambda: f64) -> Estimate {
        let logs = self.log_tilted_weights(lambda);
        let (shift, m, se) = shifted_mean(&logs, |_| 1.0);
        let scale = shift.exp();
        Estimate::new(scale * m, scale * se)
    }

    pub fn q(&self, lambda: f64) -> Estimate {
        let gap = self.alpha / (self.alpha + lambda);
        let t = self.tilted_mean(lambda);
        Estimate::new(gap * t.value, gap * t.std_error)
    }

    /// `ln q` on the pool; finite when `q` itself overflows.
    pub fn log_q(&self, lambda: f64) -> f64 {
        let logs = self.log_tilted_weights(lambda);
        (self.alpha / (self.alpha + lambda)).ln() + crate::stats::log_mean_exp(&logs)
    }

    /// `L(lambda) = -dq/dlambda`, exact on the pool.
    pub fn l(&self, lambda: f64) -> Estimate {
        let rate = self.alpha + lambda;
        let gap = self.alpha / rate;
        let logs = self.log_tilted_weights(lambda);
        let (shift, m, se) =
            shifted_mean(&logs, |j| gap * self.entries[j].sigma_star + gap / rate);
        let scale = shift.exp();
        Estimate::new(scale * m, scale * se)
    }

    /// Contribution to `q` from clusters with exactly `n` intervals.
    pub fn q_stratum(&self, lambda: f64, n: usize) -> Estimate {
        let gap = self.alpha / (self.alpha + lambda);
        let vals: Vec<f64> = self
            .entries
            .iter()
            .map(|e| {
                if e.n == n {
                    gap * (e.log_f - lambda * e.sigma_star).exp()
                } else {
                    0.0
                }
            })
            .collect();
        crate::stats::mean_se(&vals)
    }

    pub fn l_stratum(&self, lambda: f64, n: usize) -> Estimate {
        let rate = self.alpha + lambda;
        let gap = self.alpha / rate;
        let vals: Vec<f64> = self
            .entries
            .iter()
            .map(|e| {
                let s = e.sigma_star;
                if e.n == n {
                    (gap * s + gap / rate) * (e.log_f - lambda * s).exp()
                } else {
                    0.0
                }
            })
            .collect();
        crate::stats::mean_se(&vals)
    }

    /// Share of the total tilted weight carried by the largest 1% of entries.
    pub fn top_share(&self, lambda: f64) -> f64 {
        top_share(&self.log_tilted_weights(lambda))
    }
}

fn top_share(log_weights: &[f64]) -> f64 {
    if log_weights.is_empty() {
        return 0.0;
    }
    let shift = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = log_weights.iter().map(|l| (l - shift).exp()).collect();
    w.sort_by(|a, b| b.total_cmp(a));
    let k = (w.len() / 100).max(1);
    let total: f64 = w.iter().sum();
    w[..k].iter().sum::<f64>() / total
}

/// Heavy-tail warning threshold on [`ClusterPool::top_share`].
pub const HEAVY_TAIL_SHARE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QOptions {
    pub pool: PoolOptions,
    /// Running estimate above which the run stops and reports divergence.
    pub divergence_threshold: f64,
    /// Samples required before the divergence test applies.
    pub divergence_min_samples: usize,
}

impl Default for QOptions {
    fn default() -> Self {
        Self { pool: PoolOptions::default(), divergence_threshold: 10.0, divergence_min_samples: 100 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    /// Sample count at which the running estimate crossed the threshold.
    pub at_sample: usize,
    /// `ln` of the running estimate at that point.
    pub log_running: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QReport {
    pub alpha: f64,
    pub lambda: f64,
    /// `None` when the run was stopped by the divergence test.
    pub estimate: Option<Estimate>,
    pub divergence: Option<Divergence>,
    pub n_samples: usize,
    pub top_share: f64,
    pub heavy_tail: bool,
    pub bounded_clusters: usize,
}

const CHUNK: usize = 256;

/// Runs the pool in chunks and watches the running mean of the integrand
/// `coef * exp(-lambda sigma*) F`.
fn running_estimate(
    alpha: f64,
    lambda: f64,
    n_samples: usize,
    streams: &RandomStreams,
    options: &QOptions,
    coef: impl Fn(&PoolEntry) -> f64,
) -> Result<(ClusterPool, Option<Divergence>)> {
    require_positive("alpha", alpha)?;
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(invalid("lambda", format!("must be nonnegative, got {lambda}")));
    }
    if n_samples < 2 {
        return Err(invalid("n_samples", "at least 2 samples are needed"));
    }
    let mut pool = ClusterPool::build(alpha, 0, options.pool, streams)?;
    // Running log of the sum of integrand terms.
    let mut log_sum = f64::NEG_INFINITY;
    while pool.len() < n_samples {
        let start = pool.len();
        pool.grow_to((start + CHUNK).min(n_samples))?;
        for (j, e) in pool.entries()[start..].iter().enumerate() {
            let c = coef(e);
            let term = c.ln() + e.log_f - lambda * e.sigma_star;
            log_sum = log_add(log_sum, term);
            let count = start + j + 1;
            let log_running = log_sum - (count as f64).ln();
            if count >= options.divergence_min_samples
                && log_running > options.divergence_threshold.ln()
            {
                return Ok((pool, Some(Divergence { at_sample: count, log_running })));
            }
        }
    }
    Ok((pool, None))
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn report(
    pool: &ClusterPool,
    lambda: f64,
    est: Estimate,
    divergence: Option<Divergence>,
) -> QReport {
    let share = pool.top_share(lambda);
    let heavy = share > HEAVY_TAIL_SHARE;
    if heavy {
        log::warn!(
            "heavy tail: top 1% of {} weights carry {:.1}% of the sum",
            pool.len(),
            100.0 * share
        );
    }
    QReport {
        alpha: pool.alpha(),
        lambda,
        estimate: if divergence.is_some() { None } else { Some(est) },
        divergence,
        n_samples: pool.len(),
        top_share: share,
        heavy_tail: heavy,
        bounded_clusters: pool.bounded_count(),
    }
}

/// Monte Carlo estimate of `q_alpha(lambda)`.
pub fn estimate_q(
    alpha: f64,
    lambda: f64,
    n_samples: usize,
    streams: &RandomStreams,
    options: &QOptions,
) -> Result<QReport> {
    let gap = alpha / (alpha + lambda);
    let (pool, div) = running_estimate(alpha, lambda, n_samples, streams, options, |_| gap)?;
    let est = pool.q(lambda);
    Ok(report(&pool, lambda, est, div))
}

/// Monte Carlo estimate of `L_alpha(lambda)`.
pub fn estimate_l(
    alpha: f64,
    lambda: f64,
    n_samples: usize,
    streams: &RandomStreams,
    options: &QOptions,
) -> Result<QReport> {
    let rate = alpha + lambda;
    let gap = alpha / rate;
    let (pool, div) = running_estimate(alpha, lambda, n_samples, streams, options, |e| {
        gap * e.sigma_star + gap / rate
    })?;
    let est = pool.l(lambda);
    Ok(report(&pool, lambda, est, div))
}

/// `q` restricted to single-interval clusters, in closed form.
pub fn q_single_interval(alpha: f64, lambda: f64) -> f64 {
    alpha / (alpha + lambda) * std::f64::consts::SQRT_2 / (1.0 + alpha + lambda).sqrt()
}

/// `L` restricted to single-interval clusters: `-d/dlambda` of [`q_single_interval`].
pub fn l_single_interval(alpha: f64, lambda: f64) -> f64 {
    let rate = alpha + lambda;
    let s = 1.0 + rate;
    std::f64::consts::SQRT_2 * alpha * (1.0 / (rate * rate * s.sqrt()) + 0.5 / (rate * s.powf(1.5)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub pool: PoolOptions,
    pub initial_pool: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { pool: PoolOptions::default(), initial_pool: 8192 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltSolution {
    pub alpha: f64,
    pub lambda: f64,
    /// Standard error of `lambda` from `q_se / L`.
    pub lambda_se: f64,
    pub q_at_lambda: Estimate,
    pub l_at_lambda: Estimate,
    pub n_samples: usize,
    pub seed: u64,
    pub bracket: [f64; 2],
    pub q_at_bracket: [f64; 2],
    pub bounded_clusters: usize,
    pub top_share: f64,
}

/// Flat record for JSON output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TiltRecord {
    pub alpha: f64,
    pub lambda: f64,
    pub lambda_se: f64,
    pub q: f64,
    pub q_se: f64,
    #[serde(rename = "L")]
    pub l: f64,
    #[serde(rename = "L_se")]
    pub l_se: f64,
    pub n_samples: usize,
    pub seed: u64,
}

impl TiltSolution {
    pub fn record(&self) -> TiltRecord {
        TiltRecord {
            alpha: self.alpha,
            lambda: self.lambda,
            lambda_se: self.lambda_se,
            q: self.q_at_lambda.value,
            q_se: self.q_at_lambda.std_error,
            l: self.l_at_lambda.value,
            l_se: self.l_at_lambda.std_error,
            n_samples: self.n_samples,
            seed: self.seed,
        }
    }
}

/// Upper end of the bisection bracket.
pub fn bracket_upper(alpha: f64) -> f64 {
    3.0 * std::f64::consts::SQRT_2 * alpha.powf(1.5) + 10.0
}

/// Root of `q = 1` on a fixed pool, bisected to machine precision.
pub fn bisect_on_pool(pool: &ClusterPool, lo: f64, hi: f64) -> Result<f64> {
    let (q_lo, q_hi) = (pool.log_q(lo), pool.log_q(hi));
    if !(q_lo >= 0.0 && q_hi <= 0.0) {
        return Err(Error::NotBracketed { lo, hi, q_lo: q_lo.exp(), q_hi: q_hi.exp() });
    }
    let (mut a, mut b) = (lo, hi);
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        if pool.log_q(mid) > 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(0.5 * (a + b))
}

/// Solves `q(lambda) = 1`. The pool doubles until `3 SE(q) <= tol` at the root.
pub fn solve_lambda(
    alpha: f64,
    tol: f64,
    max_samples: usize,
    streams: &RandomStreams,
    options: &SolveOptions,
) -> Result<TiltSolution> {
    solve_lambda_with_pool(alpha, tol, max_samples, streams, options).map(|(sol, _)| sol)
}

/// As [`solve_lambda`], also returning the final pool.
pub fn solve_lambda_with_pool(
    alpha: f64,
    tol: f64,
    max_samples: usize,
    streams: &RandomStreams,
    options: &SolveOptions,
) -> Result<(TiltSolution, ClusterPool)> {
    require_positive("tol", tol)?;
    if max_samples < 2 {
        return Err(invalid("max_samples", "at least 2 samples are needed"));
    }
    let hi = bracket_upper(alpha);
    let mut size = options.initial_pool.clamp(2, max_samples);
    let mut pool = ClusterPool::build(alpha, size, options.pool, streams)?;
    loop {
        let q_ends = [pool.q(0.0).value, pool.q(hi).value];
        let lambda = bisect_on_pool(&pool, 0.0, hi)?;
        let q = pool.q(lambda);
        let l = pool.l(lambda);
        log::debug!("pool {}: lambda {lambda}, q {} +/- {}", pool.len(), q.value, q.std_error);
        if 3.0 * q.std_error <= tol {
            let sol = TiltSolution {
                alpha,
                lambda,
                lambda_se: q.std_error / l.value,
                q_at_lambda: q,
                l_at_lambda: l,
                n_samples: pool.len(),
                seed: streams.seed(),
                bracket: [0.0, hi],
                q_at_bracket: q_ends,
                bounded_clusters: pool.bounded_count(),
                top_share: pool.top_share(lambda),
            };
            return Ok((sol, pool));
        }
        if size >= max_samples {
            return Err(Error::BudgetExhausted {
                budget: max_samples,
                lambda,
                q: q.value,
                q_se: q.std_error,
            });
        }
        size = (2 * size).min(max_samples);
        pool.grow_to(size)?;
    }
}

/// The tilt `3 sqrt(2) alpha^{3/2}` used in the terminal Lyapunov bound.
pub fn lyapunov_lambda(alpha: f64) -> f64 {
    3.0 * std::f64::consts::SQRT_2 * alpha.powf(1.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovReport {
    pub alpha: f64,
    pub lambda: f64,
    pub n_max: usize,
    pub bound: f64,
    pub passed: bool,
    pub first_violation: Option<usize>,
    pub max_lhs: f64,
    pub argmax: usize,
}

/// Checks `(alpha/(alpha+lambda)) (n+alpha)/sqrt(n+alpha+lambda) (Pi u)(n)/u(n) <= 1/sqrt 2`
/// for `u(n) = alpha^{-n/2} (n!)^{1/2}` and `lambda = 3 sqrt(2) alpha^{3/2}`.
pub fn lyapunov_check_terminal(alpha: f64, n_max: usize) -> Result<LyapunovReport> {
    require_positive("alpha", alpha)?;
    if n_max < 1 {
        return Err(invalid("n_max", "must be at least 1"));
    }
    let lambda = lyapunov_lambda(alpha);
    let bound = std::f64::consts::FRAC_1_SQRT_2;
    let c = 1.0 / alpha.sqrt();
    let mut rep = LyapunovReport {
        alpha,
        lambda,
        n_max,
        bound,
        passed: true,
        first_violation: None,
        max_lhs: f64::NEG_INFINITY,
        argmax: 0,
    };
    for n in 1..=n_max {
        let nf = n as f64;
        // (Pi u)(n) / u(n) from the embedded chain's two moves.
        let ratio = (alpha * c * (nf + 1.0).sqrt() + nf / (c * nf.sqrt())) / (nf + alpha);
        let lhs = alpha / (alpha + lambda) * (nf + alpha) / (nf + alpha + lambda).sqrt() * ratio;
        if lhs > rep.max_lhs {
            rep.max_lhs = lhs;
            rep.argmax = n;
        }
        if lhs > bound && rep.first_violation.is_none() {
            rep.first_violation = Some(n);
            rep.passed = false;
        }
    }
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub alpha: f64,
    pub c1: f64,
    pub n_max: usize,
    pub passed: bool,
    pub first_violation: Option<usize>,
    /// Largest `c1` with `log(u / Pi u)(n) >= c1 + log(n + alpha) / 2` on `1..=n_max`.
    pub max_passing_c1: f64,
    /// `log(u / Pi u)(n_max)` and `c1 + log(n_max + alpha) / 2`, both growing like `log(n) / 2`.
    pub lhs_at_n_max: f64,
    pub rhs_at_n_max: f64,
}

/// The constant `-log(alpha)/2 - log 3` of the displayed drift bound.
pub fn drift_constant(alpha: f64) -> f64 {
    -0.5 * alpha.ln() - 3f64.ln()
}

/// Checks `log(u / Pi u)(n) >= c1 + log(n + alpha) / 2` for `n = 1..=n_max` with
/// `u(n) = alpha^{-n/2} (n!)^{1/2}`. `c1 = None` uses [`drift_constant`].
pub fn drift_check_free(alpha: f64, c1: Option<f64>, n_max: usize) -> Result<DriftReport> {
    require_positive("alpha", alpha)?;
    if n_max < 1 {
        return Err(invalid("n_max", "must be at least 1"));
    }
    let c1 = c1.unwrap_or_else(|| drift_constant(alpha));
    let c = 1.0 / alpha.sqrt();
    let mut rep = DriftReport {
        alpha,
        c1,
        n_max,
        passed: true,
        first_violation: None,
        max_passing_c1: f64::INFINITY,
        lhs_at_n_max: 0.0,
        rhs_at_n_max: 0.0,
    };
    for n in 1..=n_max {
        let nf = n as f64;
        let pu_over_u = (alpha * c * (nf + 1.0).sqrt() + nf / (c * nf.sqrt())) / (nf + alpha);
        let w = -pu_over_u.ln();
        let growth = 0.5 * (nf + alpha).ln();
        rep.max_passing_c1 = rep.max_passing_c1.min(w - growth);
        if w < c1 + growth && rep.first_violation.is_none() {
            rep.first_violation = Some(n);
            rep.passed = false;
        }
        if n == n_max {
            rep.lhs_at_n_max = w;
            rep.rhs_at_n_max = c1 + growth;
        }
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lyapunov_examples_pass() {
        for alpha in [0.05, 0.25, 1.0] {
            let r = lyapunov_check_terminal(alpha, 10_000).unwrap();
            assert!(r.passed, "{r:?}");
            assert!(r.max_lhs <= r.bound && r.max_lhs > 0.0);
        }
        assert!(lyapunov_check_terminal(1.0, 0).is_err());
    }

    #[test]
    fn lyapunov_left_side_matches_simplified_form() {
        // With c = 1/sqrt(alpha) the left side is gap * sqrt(alpha) (sqrt(n+1) + sqrt n) / sqrt(n+alpha+lambda).
        let alpha: f64 = 0.25;
        let lam = lyapunov_lambda(alpha);
        let r = lyapunov_check_terminal(alpha, 1).unwrap();
        let want = alpha / (alpha + lam) * alpha.sqrt() * (2f64.sqrt() + 1.0) / (1.0 + alpha + lam).sqrt();
        assert!((r.max_lhs - want).abs() < 1e-15);
    }

    #[test]
    fn drift_examples_pass() {
        for alpha in [0.05, 0.25, 1.0] {
            let r = drift_check_free(alpha, None, 10_000).unwrap();
            assert!(r.passed, "{r:?}");
            assert!(r.max_passing_c1 >= r.c1);
        }
        // A constant above the largest passing one must fail.
        let r = drift_check_free(0.25, None, 100).unwrap();
        let too_big = drift_check_free(0.25, Some(r.max_passing_c1 + 1e-9), 100).unwrap();
        assert!(!too_big.passed);
    }

    #[test]
    fn drift_sides_grow_alike() {
        let a = drift_check_free(0.25, None, 1_000).unwrap();
        let b = drift_check_free(0.25, None, 100_000).unwrap();
        let slope_l = (b.lhs_at_n_max - a.lhs_at_n_max) / (100f64.ln());
        let slope_r = (b.rhs_at_n_max - a.rhs_at_n_max) / (100f64.ln());
        assert!((slope_l - 0.5).abs() < 0.01 && (slope_r - 0.5).abs() < 0.01);
    }

    #[test]
    fn closed_form_strata_are_consistent() {
        let (a, l) = (0.3, 0.7);
        let h = 1e-5;
        let d = (q_single_interval(a, l + h) - q_single_interval(a, l - h)) / (2.0 * h);
        assert!((-d - l_single_interval(a, l)).abs() < 1e-8);
    }

    #[test]
    fn pool_q_is_monotone_and_l_is_its_slope() {
        let s = RandomStreams::new(21);
        let pool = ClusterPool::build(0.25, 4000, PoolOptions::default(), &s).unwrap();
        let grid: Vec<f64> = (0..50).map(|k| k as f64 * 0.1).collect();
        for w in grid.windows(2) {
            assert!(pool.q(w[0]).value >= pool.q(w[1]).value);
        }
        let h = 1e-6;
        let d = (pool.q(0.3 + h).value - pool.q(0.3 - h).value) / (2.0 * h);
        assert!((-d - pool.l(0.3).value).abs() < 1e-6 * pool.l(0.3).value);
        assert!(pool.q(1e12).value < 1e-12 && pool.q(1e4).value < pool.q(1e2).value);
        assert!(pool.l(1e12).value < 1e-12 && pool.l(0.5).value > 0.0);
    }

    #[test]
    fn single_interval_stratum_matches_closed_form() {
        let s = RandomStreams::new(22);
        let (alpha, lambda) = (0.25, 0.4);
        let pool = ClusterPool::build(alpha, 100_000, PoolOptions::default(), &s).unwrap();
        let q1 = pool.q_stratum(lambda, 1);
        let want = q_single_interval(alpha, lambda);
        assert!((q1.value - want).abs() <= 3.0 * q1.std_error, "{q1:?} vs {want}");
        let l1 = pool.l_stratum(lambda, 1);
        let want = l_single_interval(alpha, lambda);
        assert!((l1.value - want).abs() <= 3.0 * l1.std_error, "{l1:?} vs {want}");
    }

    #[test]
    fn q_at_zero_exceeds_sqrt_two_for_small_alpha() {
        let s = RandomStreams::new(23);
        for alpha in [0.05, 0.25] {
            let r = estimate_q(alpha, 0.0, 50_000, &s, &QOptions::default()).unwrap();
            let e = r.estimate.unwrap();
            assert!(e.value >= std::f64::consts::SQRT_2 - 3.0 * e.std_error, "{alpha}: {e:?}");
            assert!(r.divergence.is_none());
        }
    }

    #[test]
    fn estimate_l_is_positive_and_validates_input() {
        let s = RandomStreams::new(24);
        let r = estimate_l(0.25, 0.2, 2000, &s, &QOptions::default()).unwrap();
        assert!(r.estimate.unwrap().value > 0.0);
        assert!(estimate_q(0.25, -1.0, 100, &s, &QOptions::default()).is_err());
        assert!(estimate_q(0.0, 0.0, 100, &s, &QOptions::default()).is_err());
    }

    #[test]
    fn large_alpha_is_flagged_divergent() {
        let s = RandomStreams::new(25);
        let r = estimate_q(8.0, 0.0, 10_000, &s, &QOptions::default()).unwrap();
        assert!(r.estimate.is_none());
        let d = r.divergence.unwrap();
        assert!(d.log_running > 10f64.ln() && d.at_sample >= 100);
    }

    #[test]
    fn solution_straddles_root() {
        let tol = 0.01;
        let a = solve_lambda(0.25, tol, 1 << 20, &RandomStreams::new(26), &SolveOptions::default()).unwrap();
        assert!(a.lambda > 0.0 && a.lambda.is_finite());
        assert!((a.q_at_lambda.value - 1.0).abs() <= 3.0 * a.q_at_lambda.std_error + 1e-12);
        assert!(3.0 * a.q_at_lambda.std_error <= tol);
        let b = solve_lambda(0.25, tol, 1 << 20, &RandomStreams::new(27), &SolveOptions::default()).unwrap();
        let ea = Estimate::new(a.lambda, a.lambda_se);
        let eb = Estimate::new(b.lambda, b.lambda_se);
        assert!(ea.agrees_with(&eb, 3.0, 0.0), "{ea:?} vs {eb:?}");
        // An independent pool sees q on either side of 1 at lambda -/+ 5 CI widths.
        let delta = 5.0 * 2.0 * 1.96 * a.lambda_se;
        let pool = ClusterPool::build(0.25, 100_000, PoolOptions::default(), &RandomStreams::new(28)).unwrap();
        assert!(pool.q((a.lambda - delta).max(0.0)).value > 1.0);
        assert!(pool.q(a.lambda + delta).value < 1.0);
    }

    #[test]
    fn budget_and_bracket_errors() {
        let s = RandomStreams::new(29);
        let opts = SolveOptions { initial_pool: 64, ..Default::default() };
        assert!(matches!(
            solve_lambda(0.25, 1e-6, 256, &s, &opts),
            Err(Error::BudgetExhausted { budget: 256, .. })
        ));
        let pool = ClusterPool::build(0.25, 256, PoolOptions::default(), &s).unwrap();
        assert!(matches!(bisect_on_pool(&pool, 50.0, 60.0), Err(Error::NotBracketed { .. })));
    }

    #[test]
    fn top_share_of_equal_weights() {
        assert!((top_share(&[0.0; 200]) - 0.01).abs() < 1e-12);
        assert!(top_share(&[0.0, 0.0, 100.0]) > 0.99);
    }
}
