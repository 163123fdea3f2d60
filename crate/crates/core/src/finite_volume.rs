//! Finite-horizon expectations by self-normalized importance sampling over
//! Poisson interval configurations on `[-T, T]`.
//!
//! Intervals `[s, t]` arrive with intensity `alpha exp(-(t - s))`. Given the
//! configuration and one weight per interval the path is Gaussian, so inner
//! expectations of increment functionals are computed exactly per draw. Only
//! ratios are formed, so the normalizing constant and any `exp(2 lambda T)`
//! prefactor cancel and are never evaluated.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster_process::{ActivePeriod, LifeInterval};
use crate::error::{invalid, require_positive, Error, Result};
use crate::gaussian_cluster::{envelope_draw, envelope_ratio, ClusterGaussian, WeightVector, C0};
use crate::stats::{self, Estimate};
use crate::streams::{Purpose, RandomStreams};
use crate::tilting::{ClusterPool, PoolOptions};

/// ESS below which a finite-horizon estimate is flagged unreliable.
pub const MIN_ESS: f64 = 50.0;

/// A Poisson configuration with its connected components.
#[derive(Debug, Clone, PartialEq)]
pub struct PoissonConfiguration {
    pub horizon: f64,
    pub intervals: Vec<LifeInterval>,
    /// `(start, cluster)` in time order; cluster times are relative to `start`.
    pub clusters: Vec<(f64, ActivePeriod)>,
}

/// Connected components of the interval union, by a sweep over start times.
/// Returns indices into `intervals`.
pub fn connected_components(intervals: &[LifeInterval]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..intervals.len()).collect();
    order.sort_by(|a, b| intervals[*a].birth.total_cmp(&intervals[*b].birth));
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut reach = f64::NEG_INFINITY;
    for i in order {
        let iv = intervals[i];
        match out.last_mut() {
            Some(group) if iv.birth < reach => {
                group.push(i);
                reach = reach.max(iv.death);
            }
            _ => {
                out.push(vec![i]);
                reach = iv.death;
            }
        }
    }
    out
}

impl PoissonConfiguration {
    pub fn from_intervals(horizon: f64, intervals: Vec<LifeInterval>) -> Result<Self> {
        let mut clusters = Vec::new();
        for group in connected_components(&intervals) {
            let start = group.iter().map(|i| intervals[*i].birth).fold(f64::INFINITY, f64::min);
            let shifted = group
                .iter()
                .map(|i| LifeInterval::new(intervals[*i].birth - start, intervals[*i].death - start))
                .collect();
            clusters.push((start, ActivePeriod::from_intervals(shifted)?));
        }
        Ok(Self { horizon, intervals, clusters })
    }

    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    /// Total length of dormant time in `[-T, T]`.
    pub fn dormant_length(&self) -> f64 {
        2.0 * self.horizon - self.clusters.iter().map(|(_, c)| c.sigma_star()).sum::<f64>()
    }
}

/// `alpha (2T - 1 + e^{-2T})`, the expected number of intervals.
pub fn poisson_mass(alpha: f64, horizon: f64) -> f64 {
    alpha * (2.0 * horizon + (-2.0 * horizon).exp_m1())
}

pub fn sample_poisson_config<R: Rng + ?Sized>(
    alpha: f64,
    horizon: f64,
    rng: &mut R,
) -> Result<PoissonConfiguration> {
    require_positive("T", horizon)?;
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(invalid("alpha", format!("must be nonnegative, got {alpha}")));
    }
    let mass = poisson_mass(alpha, horizon);
    let count = if mass > 0.0 {
        Poisson::new(mass).map_err(|e| invalid("alpha", e.to_string()))?.sample(rng) as usize
    } else {
        0
    };
    let mut intervals = Vec::with_capacity(count);
    for _ in 0..count {
        // Start density proportional to 1 - e^{-(T - s)}, by rejection.
        let s = loop {
            let s = rng.random_range(-horizon..horizon);
            if rng.random::<f64>() < -(-(horizon - s)).exp_m1() {
                break s;
            }
        };
        let p: f64 = rng.random();
        let limit = horizon - s;
        let len = -(-p * -(-limit).exp_m1()).ln_1p();
        intervals.push(LifeInterval::new(s, (s + len).min(horizon)));
    }
    intervals.retain(|iv| iv.death > iv.birth);
    PoissonConfiguration::from_intervals(horizon, intervals)
}

/// Log importance weight of a configuration with envelope-drawn weights:
/// `sum_r [n_r ln sqrt(2/pi) + ln Phi_r - ln envelope_r(u_r)]`.
pub fn log_weight(config: &PoissonConfiguration, weights: &[WeightVector]) -> Result<f64> {
    if weights.len() != config.clusters.len() {
        return Err(Error::LengthMismatch { expected: config.clusters.len(), got: weights.len() });
    }
    let mut total = 0.0;
    for ((_, xi), u) in config.clusters.iter().zip(weights) {
        let n = xi.n();
        let half_log_delta: f64 = (0..n).map(|i| 0.5 * xi.delta(i).ln()).sum();
        let ratio = if n == 1 { 1.0 } else { envelope_ratio(xi, u)? };
        total += n as f64 * C0.ln() - half_log_delta + ratio.ln();
    }
    Ok(total)
}

fn draw_envelope_weights<R: Rng + ?Sized>(config: &PoissonConfiguration, rng: &mut R) -> Vec<WeightVector> {
    config
        .clusters
        .iter()
        .map(|(_, xi)| {
            let u = (0..xi.n()).map(|i| envelope_draw(xi.delta(i), rng)).collect();
            WeightVector::new(u).expect("envelope draws are positive")
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Functional {
    /// `E[(v . (omega(b) - omega(a)))^2]` for a unit vector `v`.
    SecondMoment { a: f64, b: f64 },
    /// `E[(v . increment over first) (v . increment over second)]`.
    WindowProduct { first: [f64; 2], second: [f64; 2] },
    /// `P(|v . (omega(b) - omega(a))| < threshold)`.
    Indicator { a: f64, b: f64, threshold: f64 },
}

impl Functional {
    fn windows(&self) -> ([f64; 2], [f64; 2]) {
        match *self {
            Functional::SecondMoment { a, b } | Functional::Indicator { a, b, .. } => ([a, b], [a, b]),
            Functional::WindowProduct { first, second } => (first, second),
        }
    }

    fn validate(&self, horizon: f64) -> Result<()> {
        let (w1, w2) = self.windows();
        for w in [w1, w2] {
            if !(w[0] < w[1]) {
                return Err(invalid("functional", format!("window [{}, {}] is empty", w[0], w[1])));
            }
            for t in w {
                if !(-horizon..=horizon).contains(&t) {
                    return Err(Error::OutOfRange { t, lo: -horizon, hi: horizon });
                }
            }
        }
        if let Functional::Indicator { threshold, .. } = self {
            require_positive("threshold", *threshold)?;
        }
        Ok(())
    }
}

fn overlap(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[1].min(b[1]) - a[0].max(b[0])).max(0.0)
}

/// Per-component covariance of the increments over windows `w1` and `w2`
/// given the configuration and weights.
pub fn conditional_covariance(
    config: &PoissonConfiguration,
    weights: &[WeightVector],
    w1: [f64; 2],
    w2: [f64; 2],
) -> Result<f64> {
    let mut cov = overlap(w1, w2);
    for ((start, xi), u) in config.clusters.iter().zip(weights) {
        let span = [*start, start + xi.sigma_star()];
        if overlap(span, w1) == 0.0 || overlap(span, w2) == 0.0 {
            continue;
        }
        // Replace the Brownian covariance on the span by the cluster's.
        cov -= overlap(overlap_window(w1, w2), span);
        let g = ClusterGaussian::new(xi, u)?;
        let jumps = xi.jump_times();
        let m = xi.cell_count();
        let (mut c1, mut c2) = (vec![0.0; m], vec![0.0; m]);
        let mut bridge = 0.0;
        for r in 0..m {
            let cell = [start + jumps[r], start + jumps[r + 1]];
            let len = jumps[r + 1] - jumps[r];
            let (l1, l2) = (overlap(cell, w1), overlap(cell, w2));
            c1[r] = l1 / len;
            c2[r] = l2 / len;
            bridge += overlap(overlap_window(w1, w2), cell) - l1 * l2 / len;
        }
        cov += g.covariance(&c1, &c2) + bridge;
    }
    Ok(cov)
}

/// Intersection of two windows (possibly empty, encoded with `hi <= lo`).
fn overlap_window(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0].max(b[0]), a[1].min(b[1])]
}

fn inner_value(f: &Functional, cov: f64) -> f64 {
    match *f {
        Functional::SecondMoment { .. } | Functional::WindowProduct { .. } => cov,
        Functional::Indicator { threshold, .. } => {
            if cov <= 0.0 {
                1.0
            } else {
                libm::erf(threshold / (2.0 * cov).sqrt())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteTReport {
    pub alpha: f64,
    pub t_horizon: f64,
    pub functional: Functional,
    pub estimate: Estimate,
    pub ess: f64,
    pub reliable: bool,
    pub n_samples: usize,
    /// Configurations whose inner variance exceeded the Brownian value.
    pub domination_violations: usize,
    /// Largest inner variance divided by the window length.
    pub max_inner_ratio: f64,
}

pub fn estimate_finite_t(
    alpha: f64,
    horizon: f64,
    functional: Functional,
    n_samples: usize,
    streams: &RandomStreams,
) -> Result<FiniteTReport> {
    require_positive("T", horizon)?;
    functional.validate(horizon)?;
    if n_samples < 2 {
        return Err(invalid("n_samples", "at least 2 samples are needed"));
    }
    let (w1, w2) = functional.windows();
    let draws: Vec<(f64, f64, f64)> = (0..n_samples)
        .into_par_iter()
        .map(|r| {
            let mut rng = streams.stream(Purpose::Configuration, r as u64);
            let config = sample_poisson_config(alpha, horizon, &mut rng)?;
            let weights = draw_envelope_weights(&config, &mut rng);
            let lw = log_weight(&config, &weights)?;
            let cov = conditional_covariance(&config, &weights, w1, w2)?;
            let var1 = if w1 == w2 { cov } else { conditional_covariance(&config, &weights, w1, w1)? };
            Ok((lw, inner_value(&functional, cov), var1))
        })
        .collect::<Result<_>>()?;
    let lws: Vec<f64> = draws.iter().map(|d| d.0).collect();
    let vals: Vec<f64> = draws.iter().map(|d| d.1).collect();
    let (estimate, ess) = stats::snis(&lws, &vals);
    let len1 = w1[1] - w1[0];
    let violations = draws.iter().filter(|d| d.2 > len1 * (1.0 + 1e-12)).count();
    let max_ratio = draws.iter().map(|d| d.2 / len1).fold(0.0, f64::max);
    let reliable = ess >= MIN_ESS;
    if !reliable {
        log::warn!("effective sample size {ess:.1} is below {MIN_ESS}");
    }
    Ok(FiniteTReport {
        alpha,
        t_horizon: horizon,
        functional,
        estimate,
        ess,
        reliable,
        n_samples,
        domination_violations: violations,
        max_inner_ratio: max_ratio,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZhatRow {
    pub remaining: f64,
    pub zhat: Estimate,
    pub limit: f64,
    pub relative_deviation: f64,
    /// Standard error of `relative_deviation`.
    pub relative_se: f64,
}

/// `E[exp(-lambda sigma*) F]` under the terminal-time law for each remaining
/// time, against the limit `(lambda + alpha) / alpha`. Pools share streams,
/// so rows are coupled with each other and with a free-law pool on `streams`.
pub fn estimate_zhat_convergence(
    alpha: f64,
    lambda: f64,
    remaining_times: &[f64],
    n_samples: usize,
    streams: &RandomStreams,
) -> Result<Vec<ZhatRow>> {
    let limit = (lambda + alpha) / alpha;
    remaining_times
        .iter()
        .map(|&r| {
            let pool = ClusterPool::build_terminal(alpha, r, n_samples, PoolOptions::default(), streams)?;
            let z = pool.tilted_mean(lambda);
            Ok(ZhatRow {
                remaining: r,
                zhat: z,
                limit,
                relative_deviation: (z.value - limit).abs() / limit,
                relative_se: z.std_error / limit,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poisson_mass_closed_form() {
        assert!((poisson_mass(1.0, 1.0) - (1.0 + (-2f64).exp())).abs() < 1e-15);
        let mut rng = RandomStreams::new(1).stream(Purpose::Misc, 0);
        let xs: Vec<f64> = (0..100_000)
            .map(|_| sample_poisson_config(1.0, 1.0, &mut rng).unwrap().len() as f64)
            .collect();
        let e = stats::mean_se(&xs);
        assert!((e.value - poisson_mass(1.0, 1.0)).abs() <= 3.0 * e.std_error, "{e:?}");
    }

    #[test]
    fn intervals_stay_in_horizon() {
        let mut rng = RandomStreams::new(2).stream(Purpose::Misc, 0);
        for _ in 0..5000 {
            let c = sample_poisson_config(2.0, 1.5, &mut rng).unwrap();
            assert!(c.intervals.iter().all(|iv| iv.birth >= -1.5 && iv.death <= 1.5 && iv.death > iv.birth));
            assert!(c.dormant_length() >= -1e-12);
        }
        let tiny = sample_poisson_config(1.0, 1e-9, &mut rng).unwrap();
        assert!(tiny.is_empty());
        assert!(sample_poisson_config(1.0, 0.0, &mut rng).is_err());
    }

    #[test]
    fn start_and_length_marginals() {
        // Start density (1 - e^{-(T-s)}) / (2T - 1 + e^{-2T}); mean length given s
        // is that of a unit exponential truncated at T - s.
        let (alpha, t) = (3.0, 1.0);
        let mut rng = RandomStreams::new(3).stream(Purpose::Misc, 0);
        let mut starts = Vec::new();
        for _ in 0..40_000 {
            starts.extend(sample_poisson_config(alpha, t, &mut rng).unwrap().intervals.iter().map(|iv| iv.birth));
        }
        let z = 2.0 * t - 1.0 + (-2.0 * t).exp();
        // E[s] = (1/z) int_{-T}^{T} s (1 - e^{-(T-s)}) ds, evaluated by a fine midpoint rule.
        let k = 200_000;
        let h = 2.0 * t / k as f64;
        let want: f64 = (0..k)
            .map(|i| {
                let s = -t + (i as f64 + 0.5) * h;
                s * (1.0 - (-(t - s)).exp()) * h
            })
            .sum::<f64>()
            / z;
        let e = stats::mean_se(&starts);
        assert!((e.value - want).abs() <= 3.0 * e.std_error, "{e:?} vs {want}");
    }

    fn brute_force_components(intervals: &[LifeInterval]) -> Vec<Vec<usize>> {
        let n = intervals.len();
        let mut label: Vec<usize> = (0..n).collect();
        loop {
            let mut changed = false;
            for i in 0..n {
                for j in 0..n {
                    let (a, b) = (intervals[i], intervals[j]);
                    if a.birth < b.death && b.birth < a.death && label[i] != label[j] {
                        let m = label[i].min(label[j]);
                        label[i] = m;
                        label[j] = m;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (i, l) in label.iter().enumerate() {
            groups.entry(*l).or_default().push(i);
        }
        let mut out: Vec<Vec<usize>> = groups.into_values().collect();
        out.iter_mut().for_each(|g| g.sort());
        out.sort();
        out
    }

    #[test]
    fn sweep_matches_brute_force_clustering() {
        let s = RandomStreams::new(4);
        for r in 0..10_000u64 {
            let mut rng = s.stream(Purpose::Misc, r);
            let c = sample_poisson_config(1.5, 3.0, &mut rng).unwrap();
            let mut sweep = connected_components(&c.intervals);
            sweep.iter_mut().for_each(|g| g.sort());
            sweep.sort();
            assert_eq!(sweep, brute_force_components(&c.intervals));
        }
    }

    #[test]
    fn log_weight_closed_forms() {
        let empty = PoissonConfiguration::from_intervals(1.0, vec![]).unwrap();
        assert_eq!(log_weight(&empty, &[]).unwrap(), 0.0);
        let one = PoissonConfiguration::from_intervals(2.0, vec![LifeInterval::new(-0.5, 0.25)]).unwrap();
        let u = WeightVector::new(vec![1.7]).unwrap();
        let want = (C0 / 0.75f64.sqrt()).ln();
        assert!((log_weight(&one, &[u]).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn log_weight_ignores_labels() {
        let a = vec![LifeInterval::new(-1.0, 0.5), LifeInterval::new(0.0, 1.0), LifeInterval::new(1.5, 1.8)];
        let mut b = a.clone();
        b.reverse();
        let ca = PoissonConfiguration::from_intervals(2.0, a).unwrap();
        let cb = PoissonConfiguration::from_intervals(2.0, b).unwrap();
        let u: Vec<WeightVector> = ca
            .clusters
            .iter()
            .map(|(_, xi)| WeightVector::new((0..xi.n()).map(|i| 0.5 + i as f64).collect()).unwrap())
            .collect();
        assert_eq!(ca.clusters, cb.clusters);
        assert_eq!(log_weight(&ca, &u).unwrap(), log_weight(&cb, &u).unwrap());
    }

    #[test]
    fn zero_coupling_is_brownian() {
        let s = RandomStreams::new(5);
        let r = estimate_finite_t(0.0, 2.0, Functional::SecondMoment { a: -2.0, b: 2.0 }, 100, &s).unwrap();
        assert!((r.estimate.value - 4.0).abs() < 1e-12 && r.estimate.std_error < 1e-12);
        let p = Functional::WindowProduct { first: [-1.0, 0.5], second: [0.0, 1.0] };
        let r = estimate_finite_t(0.0, 2.0, p, 100, &s).unwrap();
        assert!((r.estimate.value - 0.5).abs() < 1e-12);
        let ind = Functional::Indicator { a: 0.0, b: 1.0, threshold: 1.0 };
        let r = estimate_finite_t(0.0, 2.0, ind, 100, &s).unwrap();
        assert!((r.estimate.value - libm::erf(1.0 / 2f64.sqrt())).abs() < 1e-12);
    }

    /// Monte Carlo oracle for the conditional covariance: sample the path on a
    /// fine grid of the jump times plus window ends.
    #[test]
    fn conditional_covariance_matches_path_sampling() {
        let c = PoissonConfiguration::from_intervals(
            2.0,
            vec![LifeInterval::new(-1.5, -0.2), LifeInterval::new(-0.8, 0.6), LifeInterval::new(1.0, 1.7)],
        )
        .unwrap();
        let u = vec![WeightVector::new(vec![1.2, 0.7]).unwrap(), WeightVector::new(vec![2.0]).unwrap()];
        let (w1, w2) = ([-1.0, 1.2], [-0.5, 1.9]);
        let exact = conditional_covariance(&c, &u, w1, w2).unwrap();
        let mut rng = RandomStreams::new(6).stream(Purpose::Misc, 0);
        let gs: Vec<_> = c.clusters.iter().zip(&u).map(|((_, xi), u)| ClusterGaussian::new(xi, u).unwrap()).collect();
        let mut prods = Vec::new();
        for _ in 0..100_000 {
            let mut inc = [0.0; 2];
            for ((start, xi), g) in c.clusters.iter().zip(&gs) {
                let cells = g.sample(&mut rng);
                let local: Vec<f64> = [w1[0], w1[1], w2[0], w2[1]]
                    .iter()
                    .map(|t| (t - start).clamp(0.0, xi.sigma_star()))
                    .collect();
                let mut times = local.clone();
                times.sort_by(f64::total_cmp);
                let x = crate::gaussian_cluster::refine_path(&cells, xi, &times, &mut rng).unwrap();
                let at = |t: f64| x[times.iter().position(|s| *s == t).unwrap()][0];
                inc[0] += at(local[1]) - at(local[0]);
                inc[1] += at(local[3]) - at(local[2]);
            }
            // Brownian parts outside the clusters.
            let spans: Vec<[f64; 2]> = c.clusters.iter().map(|(s, xi)| [*s, s + xi.sigma_star()]).collect();
            let mut cuts = vec![-2.0, w1[0], w1[1], w2[0], w2[1], 2.0];
            for sp in &spans {
                cuts.extend_from_slice(sp);
            }
            cuts.sort_by(f64::total_cmp);
            for p in cuts.windows(2) {
                let piece = [p[0], p[1]];
                if piece[1] <= piece[0] || spans.iter().any(|sp| overlap(*sp, piece) > 0.0) {
                    continue;
                }
                let z: f64 = (piece[1] - piece[0]).sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal);
                if overlap(piece, w1) > 0.0 {
                    inc[0] += z;
                }
                if overlap(piece, w2) > 0.0 {
                    inc[1] += z;
                }
            }
            prods.push(inc[0] * inc[1]);
        }
        let e = stats::mean_se(&prods);
        assert!((e.value - exact).abs() <= 3.0 * e.std_error, "{e:?} vs {exact}");
    }

    #[test]
    fn second_moment_dominated_by_brownian() {
        let s = RandomStreams::new(7);
        let r = estimate_finite_t(0.5, 2.0, Functional::SecondMoment { a: -2.0, b: 2.0 }, 20_000, &s).unwrap();
        assert_eq!(r.domination_violations, 0);
        assert!(r.max_inner_ratio <= 1.0);
        assert!(r.estimate.value <= 4.0 && r.estimate.value > 0.0);
        assert!(r.reliable);
    }

    #[test]
    fn functional_validation() {
        let s = RandomStreams::new(8);
        assert!(estimate_finite_t(0.5, 1.0, Functional::SecondMoment { a: -2.0, b: 0.0 }, 10, &s).is_err());
        assert!(estimate_finite_t(0.5, 1.0, Functional::SecondMoment { a: 0.5, b: 0.0 }, 10, &s).is_err());
        let bad = Functional::Indicator { a: 0.0, b: 0.5, threshold: 0.0 };
        assert!(estimate_finite_t(0.5, 1.0, bad, 10, &s).is_err());
    }

    #[test]
    fn zhat_at_zero_tilt_matches_q() {
        let s = RandomStreams::new(9);
        let rows = estimate_zhat_convergence(0.25, 0.0, &[f64::INFINITY], 20_000, &s).unwrap();
        let q = ClusterPool::build(0.25, 20_000, PoolOptions::default(), &s).unwrap().q(0.0);
        assert!((rows[0].zhat.value - q.value).abs() < 1e-12);
        assert!((rows[0].limit - 1.0).abs() < 1e-15);
    }
}
