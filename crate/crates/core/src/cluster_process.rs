//! Single active periods of the interval birth–death process.
//!
//! An active period starts with one individual at time 0; new individuals
//! are born while the population is positive and every individual carries
//! its own life interval. The period ends at the last death `sigma_star`.
//! Two laws are provided: the free law (birth rate `alpha`, death rate 1)
//! and the terminal-time law where rates depend on the time remaining.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, require_positive, Error, Result};

/// Default cap on the number of individuals in one active period.
pub const DEFAULT_MAX_INDIVIDUALS: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifeInterval {
    pub birth: f64,
    pub death: f64,
}

impl LifeInterval {
    pub fn new(birth: f64, death: f64) -> Self {
        Self { birth, death }
    }

    pub fn length(&self) -> f64 {
        self.death - self.birth
    }

    pub fn overlap(&self, other: &LifeInterval) -> f64 {
        (self.death.min(other.death) - self.birth.max(other.birth)).max(0.0)
    }
}

/// One cluster of overlapping life intervals spanning `[0, sigma_star]`.
///
/// Intervals are stored in increasing order of death time, so interval `i`
/// dies at `t_i` with `t_1 < ... < t_n = sigma_star`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivePeriod {
    intervals: Vec<LifeInterval>,
    jump_times: Vec<f64>,
    population: Vec<u32>,
    birth_jump: Vec<usize>,
    death_jump: Vec<usize>,
}

/// Wire form of a cluster used in JSON-lines output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRecord {
    pub intervals: Vec<[f64; 2]>,
    pub jump_times: Vec<f64>,
}

impl ActivePeriod {
    /// Builds and validates a cluster. Invariant violations are reported,
    /// never repaired.
    pub fn from_intervals(mut intervals: Vec<LifeInterval>) -> Result<Self> {
        if intervals.is_empty() {
            return Err(Error::MalformedCluster("no intervals".into()));
        }
        for iv in &intervals {
            if !(iv.birth.is_finite() && iv.death.is_finite()) || iv.death <= iv.birth {
                return Err(Error::MalformedCluster(format!(
                    "interval [{}, {}] is empty or not finite",
                    iv.birth, iv.death
                )));
            }
        }
        intervals.sort_by(|a, b| a.death.total_cmp(&b.death));

        // (time, interval, is_death); births sort before deaths at equal times
        // so that a tie is detected below rather than producing a gap.
        let mut events: Vec<(f64, usize, bool)> = Vec::with_capacity(2 * intervals.len());
        for (i, iv) in intervals.iter().enumerate() {
            events.push((iv.birth, i, false));
            events.push((iv.death, i, true));
        }
        events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));

        if events[0].0 != 0.0 {
            return Err(Error::MalformedCluster(format!(
                "first birth at {} instead of 0",
                events[0].0
            )));
        }
        let mut jump_times = Vec::with_capacity(events.len());
        let mut population = Vec::with_capacity(events.len());
        let mut birth_jump = vec![0; intervals.len()];
        let mut death_jump = vec![0; intervals.len()];
        let mut alive: i64 = 0;
        for (j, &(t, i, is_death)) in events.iter().enumerate() {
            if j > 0 && t <= jump_times[j - 1] {
                return Err(Error::MalformedCluster(format!("tied jump times at {t}")));
            }
            if j > 0 && alive == 0 {
                return Err(Error::MalformedCluster(format!(
                    "population vanishes before {t}: union is not connected"
                )));
            }
            if is_death {
                alive -= 1;
                death_jump[i] = j;
            } else {
                alive += 1;
                birth_jump[i] = j;
            }
            jump_times.push(t);
            population.push(alive as u32);
        }
        debug_assert_eq!(alive, 0);
        Ok(Self { intervals, jump_times, population, birth_jump, death_jump })
    }

    pub fn n(&self) -> usize {
        self.intervals.len()
    }

    pub fn sigma_star(&self) -> f64 {
        *self.jump_times.last().expect("nonempty")
    }

    pub fn intervals(&self) -> &[LifeInterval] {
        &self.intervals
    }

    pub fn jump_times(&self) -> &[f64] {
        &self.jump_times
    }

    /// Embedded chain `X_j = N(sigma_j + 0)`, ending in 0.
    pub fn population_at_jumps(&self) -> &[u32] {
        &self.population
    }

    pub fn cell_count(&self) -> usize {
        self.jump_times.len() - 1
    }

    pub fn cell_lengths(&self) -> Vec<f64> {
        self.jump_times.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Cells `r` (0-based, cell `r` is `[sigma_r, sigma_{r+1}]`) covered by interval `i`.
    pub fn cell_range(&self, i: usize) -> std::ops::Range<usize> {
        self.birth_jump[i]..self.death_jump[i]
    }

    /// Index of the cell that ends at the death of interval `i`.
    pub fn death_cell(&self, i: usize) -> usize {
        self.death_jump[i] - 1
    }

    /// `delta_i`: length of the cell ending at the `i`-th death.
    pub fn delta(&self, i: usize) -> f64 {
        let r = self.death_jump[i];
        self.jump_times[r] - self.jump_times[r - 1]
    }

    pub fn record(&self) -> ClusterRecord {
        ClusterRecord {
            intervals: self.intervals.iter().map(|iv| [iv.birth, iv.death]).collect(),
            jump_times: self.jump_times.clone(),
        }
    }

    pub fn from_record(record: &ClusterRecord) -> Result<Self> {
        let xi = Self::from_intervals(
            record.intervals.iter().map(|[s, t]| LifeInterval::new(*s, *t)).collect(),
        )?;
        if xi.jump_times != record.jump_times {
            return Err(Error::MalformedCluster("jump_times disagree with intervals".into()));
        }
        Ok(xi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub n: usize,
    pub sigma_star: f64,
    pub deltas: Vec<f64>,
    pub taus: Vec<f64>,
    pub cell_lengths: Vec<f64>,
}

pub fn cluster_stats(xi: &ActivePeriod) -> ClusterStats {
    ClusterStats {
        n: xi.n(),
        sigma_star: xi.sigma_star(),
        deltas: (0..xi.n()).map(|i| xi.delta(i)).collect(),
        taus: xi.intervals().iter().map(LifeInterval::length).collect(),
        cell_lengths: xi.cell_lengths(),
    }
}

/// Free law: competing exponential clocks with birth rate `alpha` and
/// death rate 1 per individual.
pub fn sample_cluster<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<ActivePeriod> {
    sample_cluster_capped(alpha, DEFAULT_MAX_INDIVIDUALS, rng)
}

pub fn sample_cluster_capped<R: Rng + ?Sized>(
    alpha: f64,
    max_individuals: usize,
    rng: &mut R,
) -> Result<ActivePeriod> {
    require_positive("alpha", alpha)?;
    let mut births = vec![0.0];
    let mut deaths = vec![f64::NAN];
    let mut alive: Vec<usize> = vec![0];
    let mut t = 0.0_f64;
    while !alive.is_empty() {
        let n = alive.len() as f64;
        let rate = n + alpha;
        let wait = -rng.sample::<f64, _>(Open01).ln() / rate;
        let mut next = t + wait;
        if next <= t {
            log::warn!("event time collision at {t}; advancing by one ulp");
            next = t.next_up();
        }
        t = next;
        if rng.random::<f64>() * rate < alpha {
            if births.len() >= max_individuals {
                return Err(Error::RunawayCluster { cap: max_individuals });
            }
            alive.push(births.len());
            births.push(t);
            deaths.push(f64::NAN);
        } else {
            let k = rng.random_range(0..alive.len());
            let who = alive.swap_remove(k);
            deaths[who] = t;
        }
    }
    ActivePeriod::from_intervals(
        births.into_iter().zip(deaths).map(|(s, t)| LifeInterval::new(s, t)).collect(),
    )
}

/// Terminal-time law with `remaining` time left before the terminal:
/// birth rate `alpha (1 - e^{-(R - s)})`, death rate `1 / (1 - e^{-(R - t)})`.
///
/// Births are thinned from a rate-`alpha` Poisson stream. The death rate
/// integrates to a lifetime that is exponential truncated to `[0, R - s]`,
/// which is drawn by inversion. `remaining = f64::INFINITY` gives the free
/// law, and draws from the same stream are coupled across horizons.
pub fn sample_cluster_terminal<R: Rng + ?Sized>(
    alpha: f64,
    remaining: f64,
    rng: &mut R,
) -> Result<ActivePeriod> {
    sample_cluster_terminal_capped(alpha, remaining, DEFAULT_MAX_INDIVIDUALS, rng)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Pending {
    death: f64,
    index: usize,
}

impl Eq for Pending {}

impl Ord for Pending {
    fn cmp(&self, other: &Self) -> Ordering {
        other.death.total_cmp(&self.death)
    }
}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// `-ln(1 - p (1 - e^{-L}))`: exponential(1) truncated to `[0, L]` by inversion.
fn truncated_exponential(p: f64, limit: f64) -> f64 {
    let mass = -(-limit).exp_m1();
    -(-p * mass).ln_1p()
}

pub fn sample_cluster_terminal_capped<R: Rng + ?Sized>(
    alpha: f64,
    remaining: f64,
    max_individuals: usize,
    rng: &mut R,
) -> Result<ActivePeriod> {
    require_positive("alpha", alpha)?;
    if !(remaining > 0.0) {
        return Err(invalid("remaining", format!("must be positive, got {remaining}")));
    }
    let mut intervals = Vec::new();
    let mut heap = BinaryHeap::new();
    let tau0 = truncated_exponential(rng.sample(Open01), remaining);
    intervals.push(LifeInterval::new(0.0, tau0));
    heap.push(Pending { death: tau0, index: 0 });

    let mut next_birth = -rng.sample::<f64, _>(Open01).ln() / alpha;
    while let Some(&Pending { death, .. }) = heap.peek() {
        if next_birth < death {
            let s = next_birth;
            let keep = rng.random::<f64>() < -(-(remaining - s)).exp_m1();
            if keep {
                if intervals.len() >= max_individuals {
                    return Err(Error::RunawayCluster { cap: max_individuals });
                }
                let tau = truncated_exponential(rng.sample(Open01), remaining - s);
                heap.push(Pending { death: s + tau, index: intervals.len() });
                intervals.push(LifeInterval::new(s, s + tau));
            }
            next_birth = s - rng.sample::<f64, _>(Open01).ln() / alpha;
        } else {
            heap.pop();
        }
    }
    separate_ties(&mut intervals);
    ActivePeriod::from_intervals(intervals)
}

/// Moves exactly coincident event times apart by one ulp, in time order.
fn separate_ties(intervals: &mut [LifeInterval]) {
    let mut events: Vec<(f64, usize, bool)> = Vec::with_capacity(2 * intervals.len());
    for (i, iv) in intervals.iter().enumerate() {
        events.push((iv.birth, i, false));
        events.push((iv.death, i, true));
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
    let mut prev = f64::NEG_INFINITY;
    for (t, i, is_death) in events {
        let mut t = t;
        if t <= prev {
            log::warn!("tied event time {t}; perturbing by one ulp");
            t = prev.next_up();
            if is_death {
                intervals[i].death = t;
            } else {
                intervals[i].birth = t;
            }
        }
        prev = t;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streams::{Purpose, RandomStreams};

    fn two_interval() -> ActivePeriod {
        ActivePeriod::from_intervals(vec![LifeInterval::new(0.0, 2.0), LifeInterval::new(1.0, 3.0)])
            .unwrap()
    }

    #[test]
    fn single_interval_stats() {
        let xi = ActivePeriod::from_intervals(vec![LifeInterval::new(0.0, 0.7)]).unwrap();
        let st = cluster_stats(&xi);
        assert_eq!(st.n, 1);
        assert_eq!(st.sigma_star, 0.7);
        assert_eq!(st.deltas, vec![0.7]);
        assert_eq!(st.taus, vec![0.7]);
    }

    #[test]
    fn two_interval_stats() {
        let xi = two_interval();
        assert_eq!(xi.jump_times(), &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(xi.population_at_jumps(), &[1, 2, 1, 0]);
        let st = cluster_stats(&xi);
        assert_eq!(st.cell_lengths, vec![1.0, 1.0, 1.0]);
        assert_eq!(st.deltas, vec![1.0, 1.0]);
        assert_eq!(st.taus, vec![2.0, 2.0]);
        assert_eq!(xi.cell_range(0), 0..2);
        assert_eq!(xi.cell_range(1), 1..3);
    }

    #[test]
    fn malformed_clusters_are_rejected() {
        let gap = ActivePeriod::from_intervals(vec![
            LifeInterval::new(0.0, 1.0),
            LifeInterval::new(2.0, 3.0),
        ]);
        assert!(matches!(gap, Err(Error::MalformedCluster(_))));
        let late = ActivePeriod::from_intervals(vec![LifeInterval::new(0.5, 1.0)]);
        assert!(matches!(late, Err(Error::MalformedCluster(_))));
        let empty = ActivePeriod::from_intervals(vec![LifeInterval::new(0.0, 0.0)]);
        assert!(matches!(empty, Err(Error::MalformedCluster(_))));
        let tie = ActivePeriod::from_intervals(vec![
            LifeInterval::new(0.0, 1.0),
            LifeInterval::new(0.5, 1.0),
        ]);
        assert!(matches!(tie, Err(Error::MalformedCluster(_))));
    }

    #[test]
    fn record_round_trip() {
        let xi = two_interval();
        let back = ActivePeriod::from_record(&xi.record()).unwrap();
        assert_eq!(back, xi);
    }

    #[test]
    fn tiny_alpha_gives_single_lifetimes() {
        let mut rng = RandomStreams::new(1).stream(Purpose::Misc, 0);
        let mut total = 0.0;
        let n = 20_000;
        for _ in 0..n {
            let xi = sample_cluster(1e-12, &mut rng).unwrap();
            assert_eq!(xi.n(), 1);
            total += xi.sigma_star();
        }
        let m = total / n as f64;
        assert!((m - 1.0).abs() < 3.0 / (n as f64).sqrt() * 1.5, "mean {m}");
    }

    #[test]
    fn runaway_guard_fires() {
        let mut rng = RandomStreams::new(2).stream(Purpose::Misc, 0);
        let r = sample_cluster_capped(50.0, 100, &mut rng);
        assert!(matches!(r, Err(Error::RunawayCluster { cap: 100 })));
        let r = sample_cluster_terminal_capped(50.0, f64::INFINITY, 100, &mut rng);
        assert!(matches!(r, Err(Error::RunawayCluster { cap: 100 })));
    }

    #[test]
    fn terminal_rejects_nonpositive_remaining() {
        let mut rng = RandomStreams::new(3).stream(Purpose::Misc, 0);
        assert!(sample_cluster_terminal(1.0, 0.0, &mut rng).is_err());
        assert!(sample_cluster_terminal(1.0, -1.0, &mut rng).is_err());
    }

    #[test]
    fn terminal_extinction_before_terminal() {
        let mut rng = RandomStreams::new(4).stream(Purpose::Misc, 0);
        for _ in 0..20_000 {
            let xi = sample_cluster_terminal(1.0, 1.0, &mut rng).unwrap();
            assert!(xi.sigma_star() < 1.0);
        }
    }

    #[test]
    fn horizons_are_coupled() {
        let s = RandomStreams::new(5);
        for j in 0..200 {
            let free = sample_cluster_terminal(0.5, f64::INFINITY, &mut s.stream(Purpose::Misc, j)).unwrap();
            let far = sample_cluster_terminal(0.5, 200.0, &mut s.stream(Purpose::Misc, j)).unwrap();
            assert_eq!(free, far);
        }
    }

    #[test]
    fn truncated_exponential_stays_below_limit() {
        for &p in &[1e-12, 0.3, 0.999_999_999] {
            let t = truncated_exponential(p, 0.25);
            assert!(t > 0.0 && t < 0.25);
        }
        assert!((truncated_exponential(0.5, f64::INFINITY) - 2f64.ln()).abs() < 1e-15);
    }

    fn mean_and_se(xs: &[f64]) -> (f64, f64) {
        let e = crate::stats::mean_se(xs);
        (e.value, e.std_error)
    }

    #[test]
    fn single_birth_probability() {
        let s = RandomStreams::new(6);
        for (k, &alpha) in [0.25, 1.0, 4.0].iter().enumerate() {
            let mut rng = s.stream(Purpose::Misc, k as u64);
            let ones: Vec<f64> = (0..100_000)
                .map(|_| (sample_cluster(alpha, &mut rng).unwrap().n() == 1) as u8 as f64)
                .collect();
            let (m, se) = mean_and_se(&ones);
            let want = 1.0 / (1.0 + alpha);
            assert!((m - want).abs() <= 3.0 * se, "alpha {alpha}: {m} vs {want} (se {se})");
        }
    }

    #[test]
    fn lifetimes_are_unit_exponential() {
        let mut rng = RandomStreams::new(7).stream(Purpose::Misc, 0);
        let mut taus = Vec::new();
        for _ in 0..100_000 {
            let xi = sample_cluster(0.5, &mut rng).unwrap();
            taus.extend(xi.intervals().iter().map(LifeInterval::length));
        }
        let (m, se) = mean_and_se(&taus);
        assert!((m - 1.0).abs() <= 3.0 * se, "{m} +/- {se}");
    }

    #[test]
    fn holding_times_have_rate_n_plus_alpha() {
        let alpha = 0.5;
        let mut rng = RandomStreams::new(8).stream(Purpose::Misc, 0);
        let mut by_state: Vec<Vec<f64>> = vec![Vec::new(); 4];
        for _ in 0..100_000 {
            let xi = sample_cluster(alpha, &mut rng).unwrap();
            let pop = xi.population_at_jumps();
            for (r, len) in xi.cell_lengths().iter().enumerate() {
                let n = pop[r] as usize;
                if n < by_state.len() && pop[r + 1] < pop[r] {
                    by_state[n].push(*len);
                }
            }
        }
        for (n, waits) in by_state.iter().enumerate().skip(1) {
            // Mean of Exp(rate) is 1/rate; compare rates through the mean.
            let (m, se) = mean_and_se(waits);
            let want = 1.0 / (n as f64 + alpha);
            assert!((m - want).abs() <= 3.0 * se, "state {n}: {m} vs {want} (se {se})");
        }
    }

    /// Half the L1 distance between (n, sigma*) histograms, sigma* in bins of 0.1.
    fn histogram_distance(a: &[ActivePeriod], b: &[ActivePeriod]) -> f64 {
        use std::collections::HashMap;
        let key = |xi: &ActivePeriod| (xi.n().min(6), (xi.sigma_star() / 0.1) as i64);
        let mut h: HashMap<(usize, i64), (f64, f64)> = HashMap::new();
        for xi in a {
            h.entry(key(xi)).or_default().0 += 1.0 / a.len() as f64;
        }
        for xi in b {
            h.entry(key(xi)).or_default().1 += 1.0 / b.len() as f64;
        }
        0.5 * h.values().map(|(p, q)| (p - q).abs()).sum::<f64>()
    }

    #[test]
    fn long_horizon_matches_free_law() {
        let s = RandomStreams::new(9);
        let n = 100_000;
        // The proxy's sampling floor at this size is about 0.02 at alpha = 0.25.
        let alpha = 0.1;
        let mut r1 = s.stream(Purpose::Misc, 0);
        let mut r2 = s.stream(Purpose::Misc, 1);
        let free: Vec<_> = (0..n).map(|_| sample_cluster(alpha, &mut r1).unwrap()).collect();
        let term: Vec<_> =
            (0..n).map(|_| sample_cluster_terminal(alpha, 50.0, &mut r2).unwrap()).collect();
        let d = histogram_distance(&free, &term);
        assert!(d < 0.02, "histogram distance {d}");
    }

    #[test]
    fn gillespie_and_thinning_agree_on_free_law() {
        let s = RandomStreams::new(10);
        let alpha = 0.5;
        let mut r1 = s.stream(Purpose::Misc, 0);
        let mut r2 = s.stream(Purpose::Misc, 1);
        let mut a = (Vec::new(), Vec::new());
        let mut b = (Vec::new(), Vec::new());
        for _ in 0..50_000 {
            let x = sample_cluster(alpha, &mut r1).unwrap();
            a.0.push(x.n() as f64);
            a.1.push(x.sigma_star());
            let y = sample_cluster_terminal(alpha, f64::INFINITY, &mut r2).unwrap();
            b.0.push(y.n() as f64);
            b.1.push(y.sigma_star());
        }
        for (x, y) in [(&a.0, &b.0), (&a.1, &b.1)] {
            let ex = crate::stats::mean_se(x);
            let ey = crate::stats::mean_se(y);
            assert!(ex.agrees_with(&ey, 3.5, 0.0), "{ex:?} vs {ey:?}");
        }
    }

    #[test]
    fn short_horizon_has_fewer_births() {
        let s = RandomStreams::new(11);
        let mut free = Vec::new();
        let mut term = Vec::new();
        for j in 0..50_000 {
            free.push(sample_cluster(1.0, &mut s.stream(Purpose::Misc, j)).unwrap().n() as f64);
            term.push(
                sample_cluster_terminal(1.0, 0.1, &mut s.stream(Purpose::Window, j)).unwrap().n() as f64,
            );
        }
        let ef = crate::stats::mean_se(&free);
        let et = crate::stats::mean_se(&term);
        assert!(et.value + 3.0 * et.std_error.hypot(ef.std_error) < ef.value, "{et:?} vs {ef:?}");
    }

    proptest::proptest! {
        #[test]
        fn sampled_clusters_satisfy_invariants(seed in 0u64..1_000_000, alpha in 0.01f64..3.0, horizon in 0.05f64..20.0) {
            let s = RandomStreams::new(seed);
            for xi in [
                sample_cluster(alpha, &mut s.stream(Purpose::Misc, 0)).unwrap(),
                sample_cluster_terminal(alpha, horizon, &mut s.stream(Purpose::Misc, 1)).unwrap(),
            ] {
                let n = xi.n();
                proptest::prop_assert_eq!(xi.jump_times().len(), 2 * n);
                proptest::prop_assert_eq!(xi.cell_count(), 2 * n - 1);
                let pop = xi.population_at_jumps();
                proptest::prop_assert_eq!(pop[0], 1);
                proptest::prop_assert_eq!(*pop.last().unwrap(), 0);
                for w in pop.windows(2) {
                    proptest::prop_assert!(w[0] > 0);
                    proptest::prop_assert_eq!((w[0] as i64 - w[1] as i64).abs(), 1);
                }
                let st = cluster_stats(&xi);
                let total: f64 = st.cell_lengths.iter().sum();
                proptest::prop_assert!((total - st.sigma_star).abs() <= 1e-12 * st.sigma_star.max(1.0));
                proptest::prop_assert!(st.deltas.iter().all(|d| *d > 0.0));
                proptest::prop_assert!(st.taus.iter().all(|t| *t > 0.0));
            }
        }
    }
}
