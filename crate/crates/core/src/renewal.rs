//! The infinite-volume measure as a stationary alternating renewal process.
//!
//! Dormant gaps are exponential with rate `alpha + lambda`. Active periods
//! follow the tilted cluster law, proportional to `exp(-lambda sigma*) F(xi)`
//! under the free law, and carry weights drawn from their conditional law.
//! Given the configuration the path is Brownian on gaps and follows the
//! cluster Gaussian on active periods, independently across items.

use rand::distr::Open01;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster_process::{ActivePeriod, ClusterRecord};
use crate::error::{invalid, require_positive, Error, Result};
use crate::gaussian_cluster::{increment_variance, refine_path, sample_weights, ClusterGaussian, WeightVector};
use crate::stats::{self, Estimate};
use crate::streams::{Purpose, RandomStreams};
use crate::tilting::{ClusterPool, PoolEntry, PoolOptions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DormantGap {
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedCluster {
    pub cluster: ActivePeriod,
    pub weights: WeightVector,
}

impl WeightedCluster {
    pub fn new(cluster: ActivePeriod, weights: WeightVector) -> Result<Self> {
        if cluster.n() != weights.len() {
            return Err(Error::LengthMismatch { expected: cluster.n(), got: weights.len() });
        }
        Ok(Self { cluster, weights })
    }
}

pub fn sample_tilted_gap<R: Rng + ?Sized>(alpha: f64, lambda: f64, rng: &mut R) -> Result<DormantGap> {
    require_positive("alpha + lambda", alpha + lambda)?;
    let e: f64 = rng.sample(Open01);
    Ok(DormantGap { length: -e.ln() / (alpha + lambda) })
}

/// Sampling-importance-resampling approximation of the tilted cluster law,
/// built once from a free-law pool.
#[derive(Debug, Clone)]
pub struct TiltedClusterSampler {
    alpha: f64,
    lambda: f64,
    pool: ClusterPool,
    /// Normalized cumulative weights.
    cumulative: Vec<f64>,
    ess: f64,
}

impl TiltedClusterSampler {
    pub fn new(pool: ClusterPool, lambda: f64) -> Result<Self> {
        let logs = pool.log_tilted_weights(lambda);
        let shift = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logs.iter().map(|l| (l - shift).exp()).collect();
        let total: f64 = w.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::DegeneratePool { size: pool.len() });
        }
        let mut acc = 0.0;
        let cumulative = w
            .iter()
            .map(|x| {
                acc += x / total;
                acc
            })
            .collect();
        let ess = stats::effective_sample_size(&w);
        Ok(Self { alpha: pool.alpha(), lambda, pool, cumulative, ess })
    }

    /// Builds a pool of `pool_size` free-law clusters on `streams`.
    pub fn build(alpha: f64, lambda: f64, pool_size: usize, streams: &RandomStreams) -> Result<Self> {
        if pool_size < 1000 {
            return Err(invalid("pool_size", format!("must be at least 1000, got {pool_size}")));
        }
        let pool = ClusterPool::build(alpha, pool_size, PoolOptions::default(), streams)?;
        Self::new(pool, lambda)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn pool(&self) -> &ClusterPool {
        &self.pool
    }

    pub fn effective_sample_size(&self) -> f64 {
        self.ess
    }

    fn index_of(&self, p: f64) -> usize {
        self.cumulative.partition_point(|c| *c < p).min(self.cumulative.len() - 1)
    }

    pub fn draw_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.index_of(rng.random::<f64>())
    }

    /// `k` indices by systematic resampling.
    pub fn systematic_indices<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<usize> {
        let u0: f64 = rng.random::<f64>() / k as f64;
        (0..k).map(|i| self.index_of(u0 + i as f64 / k as f64)).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<WeightedCluster> {
        let j = self.draw_index(rng);
        let cluster = self.pool.cluster(j)?;
        let weights = sample_weights(&cluster, rng)?;
        Ok(WeightedCluster { cluster, weights })
    }

    /// Self-normalized pool estimate of the tilted mean of `f(entry)`.
    pub fn tilted_mean(&self, f: impl Fn(&PoolEntry) -> f64) -> Estimate {
        let logs = self.pool.log_tilted_weights(self.lambda);
        let vals: Vec<f64> = self.pool.entries().iter().map(f).collect();
        stats::snis(&logs, &vals).0
    }

    /// `m1`, the tilted mean cluster length.
    pub fn mean_cluster_length(&self) -> Estimate {
        self.tilted_mean(|e| e.sigma_star)
    }

    /// `m2 = 1 / (alpha + lambda)`, the tilted mean gap length.
    pub fn mean_gap_length(&self) -> f64 {
        1.0 / (self.alpha + self.lambda)
    }

    /// Default burn-in `50 max(1, m1 + m2)`.
    pub fn default_burn_in(&self) -> f64 {
        50.0 * (self.mean_cluster_length().value + self.mean_gap_length()).max(1.0)
    }
}

/// One-shot draw from the tilted cluster law with a fresh pool.
pub fn sample_tilted_cluster(
    alpha: f64,
    lambda: f64,
    pool_size: usize,
    streams: &RandomStreams,
) -> Result<WeightedCluster> {
    let sampler = TiltedClusterSampler::build(alpha, lambda, pool_size, streams)?;
    sampler.sample(&mut streams.stream(Purpose::TiltedPool, 0))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Item {
    Gap(DormantGap),
    Cluster(WeightedCluster),
}

impl Item {
    pub fn span(&self) -> f64 {
        match self {
            Item::Gap(g) => g.length,
            Item::Cluster(c) => c.cluster.sigma_star(),
        }
    }

    pub fn is_cluster(&self) -> bool {
        matches!(self, Item::Cluster(_))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlacedItem {
    pub start: f64,
    pub item: Item,
}

impl PlacedItem {
    pub fn end(&self) -> f64 {
        self.start + self.item.span()
    }
}

/// Items intersecting `window`, in time order; the first and last may be cut.
#[derive(Debug, Clone, PartialEq)]
pub struct RenewalConfiguration {
    pub window: [f64; 2],
    pub items: Vec<PlacedItem>,
    pub cut_left: bool,
    pub cut_right: bool,
}

impl RenewalConfiguration {
    /// Span of item `k` inside the window.
    pub fn clipped_span(&self, k: usize) -> f64 {
        let it = &self.items[k];
        it.end().min(self.window[1]) - it.start.max(self.window[0])
    }

    /// Fraction of the window covered by active periods.
    pub fn occupancy(&self) -> f64 {
        let covered: f64 = (0..self.items.len())
            .filter(|k| self.items[*k].item.is_cluster())
            .map(|k| self.clipped_span(k))
            .sum();
        covered / (self.window[1] - self.window[0])
    }

    /// The item whose span contains `t`.
    pub fn item_at(&self, t: f64) -> Option<&PlacedItem> {
        let k = self.items.partition_point(|it| it.end() < t);
        self.items.get(k).filter(|it| it.start <= t)
    }

    pub fn record(&self) -> ConfigurationRecord {
        ConfigurationRecord {
            window: self.window,
            cut_left: self.cut_left,
            cut_right: self.cut_right,
            items: self
                .items
                .iter()
                .map(|it| match &it.item {
                    Item::Gap(g) => ItemRecord {
                        kind: "gap".into(),
                        start: it.start,
                        span: g.length,
                        cluster: None,
                        weights: None,
                    },
                    Item::Cluster(c) => ItemRecord {
                        kind: "cluster".into(),
                        start: it.start,
                        span: c.cluster.sigma_star(),
                        cluster: Some(c.cluster.record()),
                        weights: Some(c.weights.as_slice().to_vec()),
                    },
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub kind: String,
    pub start: f64,
    pub span: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cluster: Option<ClusterRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigurationRecord {
    pub window: [f64; 2],
    pub cut_left: bool,
    pub cut_right: bool,
    pub items: Vec<ItemRecord>,
}

/// Runs the alternating renewal from a dormant onset at `-A - B` and keeps
/// the items meeting `[-A, A]`.
pub fn sample_stationary_window<R: Rng + ?Sized>(
    sampler: &TiltedClusterSampler,
    half_width: f64,
    burn_in: f64,
    rng: &mut R,
) -> Result<RenewalConfiguration> {
    require_positive("half_width", half_width)?;
    if !(burn_in.is_finite() && burn_in >= 0.0) {
        return Err(invalid("burn_in", format!("must be nonnegative, got {burn_in}")));
    }
    let (lo, hi) = (-half_width, half_width);
    let mut t = lo - burn_in;
    let mut gap_next = true;
    let mut items = Vec::new();
    while t < hi {
        let item = if gap_next {
            Item::Gap(sample_tilted_gap(sampler.alpha, sampler.lambda, rng)?)
        } else {
            // Clusters ending before the window only need their span.
            Item::Cluster(sampler.sample(rng)?)
        };
        let end = t + item.span();
        if end > lo {
            items.push(PlacedItem { start: t, item });
        }
        t = end;
        gap_next = !gap_next;
    }
    let cut_left = items.first().is_some_and(|it| it.start < lo);
    let cut_right = items.last().is_some_and(|it| it.end() > hi);
    Ok(RenewalConfiguration { window: [lo, hi], items, cut_left, cut_right })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSample {
    pub times: Vec<f64>,
    pub increments: Vec<[f64; 3]>,
}

/// Positions (up to a common offset) at sorted `times` inside the window.
pub fn sample_positions<R: Rng + ?Sized>(
    config: &RenewalConfiguration,
    times: &[f64],
    rng: &mut R,
) -> Result<Vec<[f64; 3]>> {
    let [lo, hi] = config.window;
    for w in times.windows(2) {
        if w[1] < w[0] {
            return Err(invalid("times", "must be sorted"));
        }
    }
    if let Some(&t) = times.iter().find(|t| !(lo..=hi).contains(*t)) {
        return Err(Error::OutOfRange { t, lo, hi });
    }
    let mut out = Vec::with_capacity(times.len());
    let mut offset = [0.0; 3];
    let mut next = 0;
    for it in &config.items {
        if next == times.len() {
            break;
        }
        let end = it.end();
        let k0 = next;
        while next < times.len() && times[next] <= end {
            next += 1;
        }
        let local: Vec<f64> = times[k0..next].iter().map(|t| (t - it.start).max(0.0)).collect();
        let span = it.item.span();
        match &it.item {
            Item::Gap(_) => {
                let mut step = |x: &mut [f64; 3], dt: f64| {
                    let sd = dt.max(0.0).sqrt();
                    for xd in x.iter_mut() {
                        *xd += sd * rng.sample::<f64, _>(StandardNormal);
                    }
                };
                let mut x = offset;
                let mut prev = 0.0;
                for &s in &local {
                    step(&mut x, s - prev);
                    out.push(x);
                    prev = s;
                }
                step(&mut x, span - prev);
                offset = x;
            }
            Item::Cluster(c) => {
                let g = ClusterGaussian::new(&c.cluster, &c.weights)?;
                let cells = g.sample(rng);
                let s_star = c.cluster.sigma_star();
                let local: Vec<f64> = local.iter().map(|s| s.min(s_star)).collect();
                let x = refine_path(&cells, &c.cluster, &local, rng)?;
                for p in x {
                    out.push([offset[0] + p[0], offset[1] + p[1], offset[2] + p[2]]);
                }
                let total = cells.iter().fold([0.0; 3], |a, z| [a[0] + z[0], a[1] + z[1], a[2] + z[2]]);
                for d in 0..3 {
                    offset[d] += total[d];
                }
            }
        }
    }
    debug_assert_eq!(out.len(), times.len());
    Ok(out)
}

/// Increments between consecutive requested times.
pub fn sample_polaron_path<R: Rng + ?Sized>(
    config: &RenewalConfiguration,
    times: &[f64],
    rng: &mut R,
) -> Result<PathSample> {
    let x = sample_positions(config, times, rng)?;
    let increments = x
        .windows(2)
        .map(|w| [w[1][0] - w[0][0], w[1][1] - w[0][1], w[1][2] - w[0][2]])
        .collect();
    Ok(PathSample { times: times.to_vec(), increments })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sigma2Report {
    pub alpha: f64,
    pub lambda: f64,
    pub sigma2: Estimate,
    /// Tilted mean of the per-cluster increment variance.
    pub gamma: Estimate,
    /// Tilted mean cluster length.
    pub mean_length: Estimate,
    pub ess: f64,
    pub n_clusters: usize,
    /// False when the estimate leaves `(0, 1)` by more than 3 SE.
    pub inside_unit_interval: bool,
}

/// `sigma^2 = [m2 + Gamma] / [m2 + m1]` by self-normalized importance
/// sampling over free-law clusters with exact weights `u` per cluster.
pub fn estimate_sigma2(
    alpha: f64,
    lambda: f64,
    n_clusters: usize,
    streams: &RandomStreams,
) -> Result<Sigma2Report> {
    let pool = ClusterPool::build(alpha, n_clusters, PoolOptions::default(), streams)?;
    sigma2_on_pool(&pool, lambda, streams)
}

pub fn sigma2_on_pool(pool: &ClusterPool, lambda: f64, streams: &RandomStreams) -> Result<Sigma2Report> {
    let alpha = pool.alpha();
    if pool.len() < 2 {
        return Err(invalid("n_clusters", "at least 2 clusters are needed"));
    }
    let logs = pool.log_tilted_weights(lambda);
    let gammas: Vec<f64> = pool
        .entries()
        .par_iter()
        .enumerate()
        .map(|(j, _)| {
            let cluster = pool.cluster(j)?;
            let mut rng = streams.stream(Purpose::TiltedPool, j as u64);
            let u = sample_weights(&cluster, &mut rng)?;
            increment_variance(&cluster, &u)
        })
        .collect::<Result<_>>()?;
    let shift = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - shift).exp()).collect();
    let m2 = 1.0 / (alpha + lambda);
    let mut num = Vec::with_capacity(w.len());
    let mut den = Vec::with_capacity(w.len());
    let mut wg = Vec::with_capacity(w.len());
    let mut ws = Vec::with_capacity(w.len());
    for (j, e) in pool.entries().iter().enumerate() {
        let s = e.sigma_star;
        num.push(w[j] * (m2 + gammas[j]));
        den.push(w[j] * (m2 + s));
        wg.push(w[j] * gammas[j]);
        ws.push(w[j] * s);
    }
    let sigma2 = stats::ratio_of_means(&num, &den);
    let inside = sigma2.value + 3.0 * sigma2.std_error > 0.0 && sigma2.value - 3.0 * sigma2.std_error < 1.0;
    if !inside {
        log::warn!("sigma^2 estimate {} +/- {} is outside (0, 1)", sigma2.value, sigma2.std_error);
    }
    Ok(Sigma2Report {
        alpha,
        lambda,
        sigma2,
        gamma: stats::ratio_of_means(&wg, &w),
        mean_length: stats::ratio_of_means(&ws, &w),
        ess: stats::effective_sample_size(&w),
        n_clusters: pool.len(),
        inside_unit_interval: inside,
    })
}

/// Normalized increments `(2A)^{-1/2} (omega(A) - omega(-A))` over independent windows.
pub fn normalized_increments(
    sampler: &TiltedClusterSampler,
    half_width: f64,
    burn_in: f64,
    replicas: usize,
    streams: &RandomStreams,
) -> Result<Vec<[f64; 3]>> {
    let scale = (2.0 * half_width).sqrt();
    (0..replicas)
        .into_par_iter()
        .map(|r| {
            let mut rng = streams.stream(Purpose::Window, r as u64);
            let cfg = sample_stationary_window(sampler, half_width, burn_in, &mut rng)?;
            let mut prng = streams.stream(Purpose::Path, r as u64);
            let p = sample_polaron_path(&cfg, &[-half_width, half_width], &mut prng)?;
            let z = p.increments[0];
            Ok([z[0] / scale, z[1] / scale, z[2] / scale])
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingRow {
    pub a: f64,
    /// Probability that `[-A, A]` lies inside one active period.
    pub coverage: Estimate,
    /// Correlation of `1{|x-increment| < 1}` over `[-A-1, -A]` and `[A, A+1]`.
    pub correlation: f64,
    pub correlation_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingReport {
    pub rows: Vec<MixingRow>,
    pub occupancy: Estimate,
    /// Fitted `c` in `coverage ~ C exp(-c A)`.
    pub decay_rate: f64,
    pub decay_rate_se: f64,
    /// Whether `decay_rate - 3 SE > 0`.
    pub decay_ci_excludes_zero: bool,
    pub fitted_points: usize,
}

/// Minimum number of hits for a coverage point to enter the fit.
const MIN_HITS: f64 = 20.0;

pub fn estimate_mixing(
    sampler: &TiltedClusterSampler,
    gaps: &[f64],
    n_samples: usize,
    burn_in: f64,
    streams: &RandomStreams,
) -> Result<MixingReport> {
    if gaps.is_empty() || gaps.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
        return Err(invalid("gaps", "need at least one nonnegative distance"));
    }
    if n_samples < 2 {
        return Err(invalid("n_samples", "at least 2 samples are needed"));
    }
    let a_max = gaps.iter().cloned().fold(0.0, f64::max);
    let half = a_max + 1.0;
    let mut times: Vec<f64> = gaps.iter().flat_map(|a| [-a - 1.0, -a, *a, a + 1.0]).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();

    struct Replica {
        depth: f64,
        occupancy: f64,
        left: Vec<f64>,
        right: Vec<f64>,
    }
    let reps: Vec<Replica> = (0..n_samples)
        .into_par_iter()
        .map(|r| {
            let mut rng = streams.stream(Purpose::Window, r as u64);
            let cfg = sample_stationary_window(sampler, half, burn_in, &mut rng)?;
            let depth = match cfg.item_at(0.0) {
                Some(it) if it.item.is_cluster() => (-it.start).min(it.end()),
                _ => -1.0,
            };
            let mut prng = streams.stream(Purpose::Path, r as u64);
            let x = sample_positions(&cfg, &times, &mut prng)?;
            let at = |t: f64| x[times.partition_point(|s| *s < t)][0];
            let mut left = Vec::with_capacity(gaps.len());
            let mut right = Vec::with_capacity(gaps.len());
            for a in gaps {
                left.push(((at(-a) - at(-a - 1.0)).abs() < 1.0) as u8 as f64);
                right.push(((at(a + 1.0) - at(*a)).abs() < 1.0) as u8 as f64);
            }
            Ok(Replica { depth, occupancy: cfg.occupancy(), left, right })
        })
        .collect::<Result<_>>()?;

    let n = n_samples as f64;
    let mut rows = Vec::with_capacity(gaps.len());
    let (mut fx, mut fy, mut fv) = (Vec::new(), Vec::new(), Vec::new());
    for (k, a) in gaps.iter().enumerate() {
        let hits: Vec<f64> = reps.iter().map(|r| (r.depth >= *a) as u8 as f64).collect();
        let coverage = stats::mean_se(&hits);
        let l: Vec<f64> = reps.iter().map(|r| r.left[k]).collect();
        let rr: Vec<f64> = reps.iter().map(|r| r.right[k]).collect();
        let corr = stats::correlation(&l, &rr);
        rows.push(MixingRow {
            a: *a,
            coverage,
            correlation: if corr.is_finite() { corr } else { 0.0 },
            correlation_se: 1.0 / n.sqrt(),
        });
        let f = coverage.value;
        if f * n >= MIN_HITS && f < 1.0 {
            fx.push(*a);
            fy.push(f.ln());
            fv.push((1.0 - f) / (n * f));
        }
    }
    let occ: Vec<f64> = reps.iter().map(|r| r.occupancy).collect();
    let (decay_rate, decay_rate_se) = if fx.len() >= 2 {
        let (_, b, se) = stats::weighted_linear_fit(&fx, &fy, &fv);
        (-b, se)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(MixingReport {
        rows,
        occupancy: stats::mean_se(&occ),
        decay_rate,
        decay_rate_se,
        decay_ci_excludes_zero: decay_rate - 3.0 * decay_rate_se > 0.0,
        fitted_points: fx.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sampler(alpha: f64, lambda: f64, size: usize, seed: u64) -> TiltedClusterSampler {
        TiltedClusterSampler::build(alpha, lambda, size, &RandomStreams::new(seed)).unwrap()
    }

    #[test]
    fn tilted_gap_mean() {
        let mut rng = RandomStreams::new(1).stream(Purpose::Misc, 0);
        let (alpha, lambda) = (0.25, 0.3);
        let xs: Vec<f64> = (0..100_000).map(|_| sample_tilted_gap(alpha, lambda, &mut rng).unwrap().length).collect();
        let e = stats::mean_se(&xs);
        assert!((e.value - 1.0 / (alpha + lambda)).abs() <= 3.0 * e.std_error);
        // Memorylessness: the excess over c has the same mean.
        let c = 1.0;
        let tail: Vec<f64> = xs.iter().filter(|x| **x > c).map(|x| x - c).collect();
        let et = stats::mean_se(&tail);
        assert!((et.value - 1.0 / (alpha + lambda)).abs() <= 3.0 * et.std_error);
        assert!(sample_tilted_gap(0.0, 0.0, &mut rng).is_err());
    }

    #[test]
    fn small_pools_are_rejected() {
        assert!(TiltedClusterSampler::build(0.25, 0.1, 10, &RandomStreams::new(1)).is_err());
    }

    #[test]
    fn resampled_lengths_match_snis() {
        let s = sampler(0.25, 0.1, 20_000, 2);
        let mut rng = RandomStreams::new(3).stream(Purpose::Misc, 0);
        let idx = s.systematic_indices(200_000, &mut rng);
        let lens: Vec<f64> = idx.iter().map(|j| s.pool().entries()[*j].sigma_star).collect();
        let m = stats::mean(&lens);
        let snis = s.mean_cluster_length();
        assert!((m - snis.value).abs() < 1e-3 * snis.value, "{m} vs {snis:?}");
        // Independent pool: agreement within the combined error.
        let other = sampler(0.25, 0.1, 20_000, 4).mean_cluster_length();
        assert!(snis.agrees_with(&other, 3.0, 0.0), "{snis:?} vs {other:?}");
    }

    #[test]
    fn single_interval_frequency_follows_reweighting() {
        let (alpha, lambda) = (0.25, 0.1);
        let s = sampler(alpha, lambda, 50_000, 5);
        let mut rng = RandomStreams::new(6).stream(Purpose::Misc, 0);
        let hits: Vec<f64> = (0..100_000)
            .map(|_| (s.pool().entries()[s.draw_index(&mut rng)].n == 1) as u8 as f64)
            .collect();
        let e = stats::mean_se(&hits);
        // P_tilted(n = 1) = q_1(lambda) / q(lambda) on the pool.
        let q1 = s.pool().q_stratum(lambda, 1);
        let q = s.pool().q(lambda);
        let want = q1.value / q.value;
        assert!((e.value - want).abs() <= 3.0 * e.std_error + 1e-3, "{e:?} vs {want}");
    }

    #[test]
    fn windows_tile_and_alternate() {
        let s = sampler(0.25, 0.1, 5_000, 7);
        let mut rng = RandomStreams::new(8).stream(Purpose::Misc, 0);
        for _ in 0..200 {
            let cfg = sample_stationary_window(&s, 30.0, 20.0, &mut rng).unwrap();
            let total: f64 = (0..cfg.items.len()).map(|k| cfg.clipped_span(k)).sum();
            assert!((total - 60.0).abs() < 1e-9);
            for w in cfg.items.windows(2) {
                assert_ne!(w[0].item.is_cluster(), w[1].item.is_cluster());
                assert!((w[0].end() - w[1].start).abs() < 1e-12);
            }
            assert!(cfg.items[0].start <= -30.0 && cfg.items.last().unwrap().end() >= 30.0);
            let occ = cfg.occupancy();
            assert!((0.0..=1.0).contains(&occ));
        }
    }

    #[test]
    fn occupancy_matches_renewal_ratio_and_burn_in() {
        let (alpha, lambda) = (0.25, 0.1);
        let s = sampler(alpha, lambda, 20_000, 9);
        let b = s.default_burn_in();
        let occ = |burn: f64, seed: u64| {
            let st = RandomStreams::new(seed);
            let v: Vec<f64> = (0..4000u64)
                .into_par_iter()
                .map(|r| sample_stationary_window(&s, 20.0, burn, &mut st.stream(Purpose::Window, r)).unwrap().occupancy())
                .collect();
            stats::mean_se(&v)
        };
        let e = occ(b, 10);
        let m1 = s.mean_cluster_length().value;
        let m2 = s.mean_gap_length();
        let want = m1 / (m1 + m2);
        assert!((e.value - want).abs() <= 3.0 * e.std_error, "{e:?} vs {want}");
        let e2 = occ(2.0 * b, 10);
        assert!((e.value - e2.value).abs() <= 3.0 * e.std_error.hypot(e2.std_error));
    }

    #[test]
    fn empty_window_path_is_brownian() {
        let cfg = RenewalConfiguration {
            window: [-5.0, 5.0],
            items: vec![PlacedItem { start: -6.0, item: Item::Gap(DormantGap { length: 12.0 }) }],
            cut_left: true,
            cut_right: true,
        };
        let mut rng = RandomStreams::new(11).stream(Purpose::Misc, 0);
        let xs: Vec<f64> = (0..50_000)
            .map(|_| sample_polaron_path(&cfg, &[-5.0, 5.0], &mut rng).unwrap().increments[0][1])
            .map(|x| x * x)
            .collect();
        let e = stats::mean_se(&xs);
        assert!((e.value - 10.0).abs() <= 3.0 * e.std_error, "{e:?}");
    }

    #[test]
    fn path_respects_window_and_order() {
        let s = sampler(0.25, 0.1, 2_000, 12);
        let mut rng = RandomStreams::new(13).stream(Purpose::Misc, 0);
        let cfg = sample_stationary_window(&s, 10.0, 10.0, &mut rng).unwrap();
        assert!(sample_polaron_path(&cfg, &[-11.0, 0.0], &mut rng).is_err());
        assert!(sample_polaron_path(&cfg, &[1.0, 0.0], &mut rng).is_err());
        let times: Vec<f64> = (0..=40).map(|k| -10.0 + 0.5 * k as f64).collect();
        let p = sample_polaron_path(&cfg, &times, &mut rng).unwrap();
        assert_eq!(p.increments.len(), times.len() - 1);
        assert!(p.increments.iter().flatten().all(|x| x.is_finite()));
    }

    #[test]
    fn within_cluster_increment_variance_bounded_by_span() {
        let s = sampler(0.5, 0.2, 5_000, 14);
        let mut rng = RandomStreams::new(15).stream(Purpose::Misc, 0);
        // Find a cluster with several intervals and place it alone.
        let wc = loop {
            let c = s.sample(&mut rng).unwrap();
            if c.cluster.n() >= 3 {
                break c;
            }
        };
        let span = wc.cluster.sigma_star();
        let cfg = RenewalConfiguration {
            window: [0.0, span],
            items: vec![PlacedItem { start: 0.0, item: Item::Cluster(wc) }],
            cut_left: false,
            cut_right: false,
        };
        let (a, b) = (0.2 * span, 0.7 * span);
        let xs: Vec<f64> = (0..40_000)
            .map(|_| sample_polaron_path(&cfg, &[a, b], &mut rng).unwrap().increments[0][0].powi(2))
            .collect();
        let e = stats::mean_se(&xs);
        assert!(e.value <= (b - a) + 3.0 * e.std_error, "{e:?} vs {}", b - a);
    }

    #[test]
    fn disjoint_items_are_uncorrelated() {
        let s = sampler(0.25, 0.1, 2_000, 16);
        let mut rng = RandomStreams::new(17).stream(Purpose::Misc, 0);
        let c = s.sample(&mut rng).unwrap();
        let sp = c.cluster.sigma_star();
        let cfg = RenewalConfiguration {
            window: [0.0, sp + 1.0],
            items: vec![
                PlacedItem { start: 0.0, item: Item::Cluster(c) },
                PlacedItem { start: sp, item: Item::Gap(DormantGap { length: 1.0 }) },
            ],
            cut_left: false,
            cut_right: false,
        };
        let (mut x, mut y) = (Vec::new(), Vec::new());
        for _ in 0..20_000 {
            let p = sample_polaron_path(&cfg, &[0.0, sp, sp + 1.0], &mut rng).unwrap();
            x.push(p.increments[0][0]);
            y.push(p.increments[1][0]);
        }
        assert!(stats::correlation(&x, &y).abs() <= 3.0 / (20_000f64).sqrt());
    }

    #[test]
    fn sigma2_is_inside_unit_interval() {
        let r = estimate_sigma2(0.25, 0.1, 20_000, &RandomStreams::new(18)).unwrap();
        assert!(r.inside_unit_interval);
        assert!(r.sigma2.value > 0.0 && r.sigma2.value < 1.0);
        assert!(r.gamma.value <= r.mean_length.value);
    }

    #[test]
    fn mixing_table_shapes() {
        let s = sampler(0.25, 0.1, 5_000, 19);
        let gaps = [0.0, 0.5, 1.0, 1.5, 2.0];
        let r = estimate_mixing(&s, &gaps, 4_000, 30.0, &RandomStreams::new(20)).unwrap();
        for w in r.rows.windows(2) {
            assert!(w[1].coverage.value <= w[0].coverage.value);
        }
        // A point strictly inside an active period implies positive occupancy; the
        // closed-interval event at A = 0 has the same probability as the occupancy.
        assert!(r.rows[0].coverage.agrees_with(&r.occupancy, 3.0, 0.0));
        assert!(r.decay_rate > 0.0);
    }
}
