//! Path-space Markov chain Monte Carlo for the finite-horizon Gibbs measure
//! with weight `exp{(alpha/2) sum_{i != j} e^{-|t_i - t_j|} dt^2 / |x_i - x_j|}`
//! on grid paths, used as an independent reference.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, require_positive, Result};
use crate::gaussian_cluster::conditional_variances;
use crate::stats;

/// Pair distances below this count as collisions.
pub const COLLISION_DISTANCE: f64 = 1e-12;
const COLLISION_CAP: f64 = 1e12;
/// Shortest chain for which an estimate is reported.
pub const MIN_STEPS: usize = 10_000;

/// Grid increments on `[-T, T]` with `m` cells of width `dt = 2T/m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPath {
    pub horizon: f64,
    pub dt: f64,
    /// Increments per cell, stored by coordinate.
    pub increments: [Vec<f64>; 3],
}

impl GridPath {
    pub fn new(horizon: f64, increments: [Vec<f64>; 3]) -> Result<Self> {
        require_positive("T", horizon)?;
        let m = increments[0].len();
        if m < 2 || increments[1].len() != m || increments[2].len() != m {
            return Err(invalid("increments", "need m >= 2 cells in every coordinate"));
        }
        if increments.iter().flatten().any(|x| !x.is_finite()) {
            return Err(invalid("increments", "must be finite"));
        }
        Ok(Self { horizon, dt: 2.0 * horizon / m as f64, increments })
    }

    /// Brownian increments `N(0, dt)` per cell and coordinate.
    pub fn brownian<R: Rng + ?Sized>(horizon: f64, m: usize, rng: &mut R) -> Result<Self> {
        let sd = (2.0 * horizon / m as f64).sqrt();
        let coord = |rng: &mut R| (0..m).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect();
        let inc = [coord(rng), coord(rng), coord(rng)];
        Self::new(horizon, inc)
    }

    pub fn cells(&self) -> usize {
        self.increments[0].len()
    }

    /// `omega(T) - omega(-T)`.
    pub fn total_increment(&self) -> [f64; 3] {
        let s = |d: usize| self.increments[d].iter().sum::<f64>();
        [s(0), s(1), s(2)]
    }

    /// Increment over cells `lo..hi`.
    pub fn window_increment(&self, lo: usize, hi: usize) -> [f64; 3] {
        let s = |d: usize| self.increments[d][lo..hi].iter().sum::<f64>();
        [s(0), s(1), s(2)]
    }

    fn midpoints(&self, out: &mut [Vec<f64>; 3]) {
        for d in 0..3 {
            let inc = &self.increments[d];
            let x = &mut out[d];
            x.resize(inc.len(), 0.0);
            let mut acc = 0.0;
            for (xi, di) in x.iter_mut().zip(inc) {
                *xi = acc + 0.5 * di;
                acc += di;
            }
        }
    }
}

/// Evaluates the grid energy with a precomputed lag kernel and scratch space.
#[derive(Debug, Clone)]
pub struct EnergyKernel {
    m: usize,
    /// `alpha e^{-lag dt} dt^2` for `lag = 1..m`; index 0 unused.
    kernel: Vec<f64>,
    x: [Vec<f64>; 3],
    buf: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyValue {
    pub energy: f64,
    pub collisions: usize,
}

impl EnergyKernel {
    pub fn new(alpha: f64, horizon: f64, m: usize) -> Self {
        let dt = 2.0 * horizon / m as f64;
        let kernel = (0..m).map(|lag| alpha * (-(lag as f64) * dt).exp() * dt * dt).collect();
        Self { m, kernel, x: [Vec::new(), Vec::new(), Vec::new()], buf: vec![0.0; m] }
    }

    /// `(alpha/2) sum_{i != j}`, written as `alpha sum_{i < j}` over lags.
    pub fn energy(&mut self, path: &GridPath) -> EnergyValue {
        assert_eq!(path.cells(), self.m, "path and kernel disagree on the cell count");
        path.midpoints(&mut self.x);
        let [x, y, z] = &self.x;
        let mut total = 0.0;
        let mut collisions = 0;
        for lag in 1..self.m {
            let len = self.m - lag;
            let buf = &mut self.buf[..len];
            let mut min_r2 = f64::INFINITY;
            for (((b, (x0, x1)), (y0, y1)), (z0, z1)) in buf
                .iter_mut()
                .zip(x.iter().zip(&x[lag..]))
                .zip(y.iter().zip(&y[lag..]))
                .zip(z.iter().zip(&z[lag..]))
            {
                let (dx, dy, dz) = (x1 - x0, y1 - y0, z1 - z0);
                *b = dx * dx + dy * dy + dz * dz;
                min_r2 = min_r2.min(*b);
            }
            let sum = if min_r2 < COLLISION_DISTANCE * COLLISION_DISTANCE {
                buf.iter()
                    .map(|r2| {
                        if *r2 < COLLISION_DISTANCE * COLLISION_DISTANCE {
                            collisions += 1;
                            COLLISION_CAP
                        } else {
                            1.0 / r2.sqrt()
                        }
                    })
                    .sum::<f64>()
            } else {
                inverse_sqrt_sum(buf)
            };
            total += self.kernel[lag] * sum;
        }
        EnergyValue { energy: total, collisions }
    }
}

fn inverse_sqrt_sum(buf: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let mut chunks = buf.chunks_exact(4);
    for c in &mut chunks {
        for k in 0..4 {
            acc[k] += 1.0 / c[k].sqrt();
        }
    }
    let tail: f64 = chunks.remainder().iter().map(|r| 1.0 / r.sqrt()).sum();
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

/// Energy of one path; see [`EnergyKernel`] for repeated evaluation.
pub fn energy(path: &GridPath, alpha: f64) -> EnergyValue {
    EnergyKernel::new(alpha, path.horizon, path.cells()).energy(path)
}

/// Chain state: current path and its energy.
#[derive(Debug, Clone)]
pub struct PcnChain {
    pub path: GridPath,
    pub energy: f64,
    pub collisions: usize,
    kernel: EnergyKernel,
    proposal: GridPath,
}

impl PcnChain {
    pub fn new(alpha: f64, path: GridPath) -> Self {
        let mut kernel = EnergyKernel::new(alpha, path.horizon, path.cells());
        let e = kernel.energy(&path);
        let proposal = path.clone();
        Self { path, energy: e.energy, collisions: e.collisions, kernel, proposal }
    }

    /// One preconditioned Crank-Nicolson step; returns whether it was accepted.
    pub fn step<R: Rng + ?Sized>(&mut self, beta: f64, rng: &mut R) -> bool {
        let keep = (1.0 - beta * beta).sqrt();
        let sd = beta * self.path.dt.sqrt();
        for d in 0..3 {
            for (p, c) in self.proposal.increments[d].iter_mut().zip(&self.path.increments[d]) {
                *p = keep * c + sd * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let e = self.kernel.energy(&self.proposal);
        let log_accept = e.energy - self.energy;
        if log_accept >= 0.0 || rng.random::<f64>() < log_accept.exp() {
            std::mem::swap(&mut self.path, &mut self.proposal);
            self.energy = e.energy;
            self.collisions += e.collisions;
            true
        } else {
            false
        }
    }
}

/// Single step on a standalone path.
pub fn pcn_step<R: Rng + ?Sized>(
    path: GridPath,
    beta: f64,
    alpha: f64,
    rng: &mut R,
) -> Result<(GridPath, bool)> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(invalid("beta", format!("must lie in (0, 1), got {beta}")));
    }
    let mut chain = PcnChain::new(alpha, path);
    let acc = chain.step(beta, rng);
    Ok((chain.path, acc))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainOptions {
    /// Fraction of `n_steps` spent tuning `beta` before it is frozen.
    pub burn_in_fraction: f64,
    pub target_acceptance: f64,
    pub batches: usize,
    /// Keep the full traces in the report.
    pub keep_traces: bool,
}

impl Default for ChainOptions {
    fn default() -> Self {
        Self { burn_in_fraction: 0.1, target_acceptance: 0.3, batches: 50, keep_traces: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainReport {
    pub alpha: f64,
    pub t_horizon: f64,
    pub m: usize,
    pub n_steps: usize,
    pub beta: f64,
    pub acceptance: f64,
    /// Estimate of `E[(v . (omega(T) - omega(-T)))^2]`, averaged over directions.
    pub second_moment: stats::Estimate,
    pub iat: f64,
    pub ess: f64,
    pub reliable: bool,
    pub collisions: usize,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub trace: Vec<f64>,
    /// `omega(T) - omega(-T)` per step.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub increments: Vec<[f64; 3]>,
}

/// Runs a pCN chain from a Brownian start. `beta` is the initial step size.
pub fn run_chain<R: Rng + ?Sized>(
    alpha: f64,
    horizon: f64,
    m: usize,
    n_steps: usize,
    beta: f64,
    options: &ChainOptions,
    rng: &mut R,
) -> Result<ChainReport> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(invalid("beta", format!("must lie in (0, 1), got {beta}")));
    }
    if n_steps < MIN_STEPS || n_steps < 2 * options.batches.max(2) {
        return Err(invalid("n_steps", format!("at least {MIN_STEPS} steps are needed, got {n_steps}")));
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(invalid("alpha", format!("must be nonnegative, got {alpha}")));
    }
    let mut chain = PcnChain::new(alpha, GridPath::brownian(horizon, m, rng)?);
    let burn = (options.burn_in_fraction * n_steps as f64) as usize;
    let mut beta = beta;
    let window = 100;
    let mut accepted = 0usize;
    for k in 0..burn {
        if chain.step(beta, rng) {
            accepted += 1;
        }
        if (k + 1) % window == 0 {
            let rate = accepted as f64 / window as f64;
            beta = (beta * (rate - options.target_acceptance).exp()).clamp(1e-4, 0.999);
            accepted = 0;
        }
    }
    let mut trace = Vec::with_capacity(n_steps);
    let mut incs = Vec::with_capacity(if options.keep_traces { n_steps } else { 0 });
    let mut acc = 0usize;
    for _ in 0..n_steps {
        if chain.step(beta, rng) {
            acc += 1;
        }
        let d = chain.path.total_increment();
        trace.push((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) / 3.0);
        if options.keep_traces {
            incs.push(d);
        }
    }
    let mean = stats::mean(&trace);
    let se = stats::batch_means_se(&trace, options.batches);
    let iat = stats::integrated_autocorrelation_time(&trace);
    let ess = n_steps as f64 / iat;
    let reliable = ess >= 50.0;
    if !reliable {
        log::warn!("chain effective sample size {ess:.1} is below 50");
    }
    Ok(ChainReport {
        alpha,
        t_horizon: horizon,
        m,
        n_steps,
        beta,
        acceptance: acc as f64 / n_steps as f64,
        second_moment: stats::Estimate::new(mean, se),
        iat,
        ess,
        reliable,
        collisions: chain.collisions,
        trace: if options.keep_traces { trace } else { Vec::new() },
        increments: incs,
    })
}

/// Combines independent chains: mean of means with independent errors.
pub fn combine_chains(reports: &[ChainReport]) -> stats::Estimate {
    let k = reports.len() as f64;
    let m = reports.iter().map(|r| r.second_moment.value).sum::<f64>() / k;
    let se = reports.iter().map(|r| r.second_moment.std_error.powi(2)).sum::<f64>().sqrt() / k;
    stats::Estimate::new(m, se)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetLemmaReport {
    pub dim: usize,
    pub trials: usize,
    /// Trials where `det(M)` and the product of conditional variances differ by more than 1e-9 relative.
    pub identity_violations: usize,
    /// Trials with `det(I + M) < prod(1 + gamma_i^2)`.
    pub inequality_violations: usize,
    pub max_relative_error: f64,
}

impl DetLemmaReport {
    pub fn passed(&self) -> bool {
        self.identity_violations == 0 && self.inequality_violations == 0
    }
}

/// Checks `det M = prod gamma_i^2` and `det(I + M) >= prod(1 + gamma_i^2)` on one matrix.
/// Returns `(relative identity error, inequality holds)`.
pub fn det_lemma_single(m: &DMatrix<f64>) -> Result<(f64, bool)> {
    let dim = m.nrows();
    let g = conditional_variances(m)?;
    let det = m.clone().lu().determinant();
    let prod: f64 = g.iter().product();
    let rel = (det - prod).abs() / det.abs();
    let det_ip = (m + DMatrix::<f64>::identity(dim, dim)).lu().determinant();
    let lower: f64 = g.iter().map(|x| 1.0 + x).product();
    Ok((rel, det_ip >= lower * (1.0 - 1e-12)))
}

/// Random Wishart-type SPD matrices `A A^T / (dim + 2)` with `A` of size `dim x (dim + 2)`.
pub fn det_lemma_check<R: Rng + ?Sized>(dim: usize, trials: usize, rng: &mut R) -> Result<DetLemmaReport> {
    if dim == 0 || dim > 12 {
        return Err(invalid("dim", format!("must be in 1..=12, got {dim}")));
    }
    let mut rep = DetLemmaReport {
        dim,
        trials,
        identity_violations: 0,
        inequality_violations: 0,
        max_relative_error: 0.0,
    };
    for _ in 0..trials {
        let a = DMatrix::<f64>::from_fn(dim, dim + 2, |_, _| rng.sample(StandardNormal));
        let m = &a * a.transpose() / (dim as f64 + 2.0);
        let (rel, ok) = det_lemma_single(&m)?;
        rep.max_relative_error = rep.max_relative_error.max(rel);
        if rel > 1e-9 {
            rep.identity_violations += 1;
        }
        if !ok {
            rep.inequality_violations += 1;
        }
    }
    Ok(rep)
}
