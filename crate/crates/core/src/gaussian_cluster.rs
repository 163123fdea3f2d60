//! Exact linear algebra for one weighted cluster.
//!
//! Given an active period and one positive weight per life interval, the
//! tilted Gaussian law on increments only couples the increments over the
//! jump-time cells, so everything reduces to dense matrices of size `n`
//! (interval overlaps) or `2n - 1` (cells).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::distr::Open01;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cluster_process::ActivePeriod;
use crate::error::{invalid, Error, Result};
use crate::stats::Estimate;

/// `sqrt(2 / pi)`, the constant of the Gaussian representation of `1/|x|`.
pub const C0: f64 = 0.797_884_560_802_865_4;

const JITTER: f64 = 1e-12;

/// Default cap on proposals in [`sample_weights`].
pub const DEFAULT_MAX_PROPOSALS: usize = 1_000_000;

/// One positive weight per life interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(u: Vec<f64>) -> Result<Self> {
        if let Some(bad) = u.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
            return Err(invalid("u", format!("weights must be positive and finite, got {bad}")));
        }
        Ok(Self(u))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_len(xi: &ActivePeriod, u: &WeightVector) -> Result<()> {
    if u.len() != xi.n() {
        return Err(Error::LengthMismatch { expected: xi.n(), got: u.len() });
    }
    Ok(())
}

/// Cholesky factorization with one jittered retry.
pub fn cholesky(m: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let dim = m.nrows();
    match Cholesky::new(m.clone()) {
        Some(c) => Ok(c),
        None => {
            let jittered = m + DMatrix::<f64>::identity(dim, dim) * JITTER;
            Cholesky::new(jittered).ok_or(Error::NotPositiveDefinite { dim })
        }
    }
}

/// Conditional variances `gamma_i^2` read off the Cholesky diagonal.
pub fn conditional_variances(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    let c = cholesky(m.clone())?;
    Ok(c.l_dirty().diagonal().iter().map(|d| d * d).collect())
}

/// `C_ik = u_i u_k |J_i ∩ J_k|`.
pub fn overlap_covariance(xi: &ActivePeriod, u: &WeightVector) -> Result<DMatrix<f64>> {
    check_len(xi, u)?;
    let n = xi.n();
    let iv = xi.intervals();
    let u = u.as_slice();
    Ok(DMatrix::from_fn(n, n, |i, k| u[i] * u[k] * iv[i].overlap(&iv[k])))
}

/// `ln det(I + C)`.
pub fn log_det_i_plus_c(xi: &ActivePeriod, u: &WeightVector) -> Result<f64> {
    let n = xi.n();
    let m = overlap_covariance(xi, u)? + DMatrix::<f64>::identity(n, n);
    let c = cholesky(m)?;
    Ok(2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// `ln Phi = -3/2 ln det(I + C)`.
pub fn log_phi(xi: &ActivePeriod, u: &WeightVector) -> Result<f64> {
    Ok(-1.5 * log_det_i_plus_c(xi, u)?)
}

/// `Phi(xi, u) = det(I + C)^{-3/2}`.
pub fn phi(xi: &ActivePeriod, u: &WeightVector) -> Result<f64> {
    Ok(log_phi(xi, u)?.exp())
}

/// Log of the product envelope `prod (1 + u_i^2 delta_i)^{-3/2}`.
fn log_upper_bound(xi: &ActivePeriod, u: &[f64]) -> f64 {
    -1.5 * u.iter().enumerate().map(|(i, ui)| (ui * ui * xi.delta(i)).ln_1p()).sum::<f64>()
}

fn log_lower_bound(xi: &ActivePeriod, u: &[f64]) -> f64 {
    -1.5 * u
        .iter()
        .zip(xi.intervals())
        .map(|(ui, iv)| (ui * ui * iv.length()).ln_1p())
        .sum::<f64>()
}

/// `(prod (1 + u_i^2 tau_i)^{-3/2}, prod (1 + u_i^2 delta_i)^{-3/2})`.
pub fn phi_bounds(xi: &ActivePeriod, u: &WeightVector) -> Result<(f64, f64)> {
    check_len(xi, u)?;
    Ok((log_lower_bound(xi, u.as_slice()).exp(), log_upper_bound(xi, u.as_slice()).exp()))
}

/// Rejection / importance weight `Phi / prod (1 + u_i^2 delta_i)^{-3/2}`, in `[0, 1]`.
pub fn envelope_ratio(xi: &ActivePeriod, u: &WeightVector) -> Result<f64> {
    Ok((log_phi(xi, u)? - log_upper_bound(xi, u.as_slice())).exp().min(1.0))
}

/// Precision of the cell increments: `diag(1/len_r) + sum_i u_i^2 a_i a_i^T`.
pub fn cell_precision(xi: &ActivePeriod, u: &WeightVector) -> Result<DMatrix<f64>> {
    check_len(xi, u)?;
    let cells = xi.cell_lengths();
    if let Some(r) = cells.iter().position(|l| !(*l > 0.0)) {
        return Err(Error::MalformedCluster(format!("cell {r} has zero length")));
    }
    let m = cells.len();
    let mut p = DMatrix::<f64>::zeros(m, m);
    for (r, l) in cells.iter().enumerate() {
        p[(r, r)] = 1.0 / l;
    }
    for (i, ui) in u.as_slice().iter().enumerate() {
        let range = xi.cell_range(i);
        let w = ui * ui;
        for a in range.clone() {
            for b in range.clone() {
                p[(a, b)] += w;
            }
        }
    }
    Ok(p)
}

/// The tilted Gaussian of one weighted cluster, factorized once.
#[derive(Debug, Clone)]
pub struct ClusterGaussian {
    pub overlap_c: DMatrix<f64>,
    pub cell_precision: DMatrix<f64>,
    cholesky: Cholesky<f64, Dyn>,
}

impl ClusterGaussian {
    pub fn new(xi: &ActivePeriod, u: &WeightVector) -> Result<Self> {
        let overlap_c = overlap_covariance(xi, u)?;
        let cell_precision = cell_precision(xi, u)?;
        let cholesky = cholesky(cell_precision.clone())?;
        Ok(Self { overlap_c, cell_precision, cholesky })
    }

    /// Lower-triangular `L` with `L L^T = cell_precision`.
    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        self.cholesky.l()
    }

    /// `b^T P^{-1} c` for cell coefficient vectors `b`, `c`.
    pub fn covariance(&self, b: &[f64], c: &[f64]) -> f64 {
        let y = self.cholesky.l_dirty().solve_lower_triangular(&DVector::from_column_slice(b));
        let z = self.cholesky.l_dirty().solve_lower_triangular(&DVector::from_column_slice(c));
        match (y, z) {
            (Some(y), Some(z)) => y.dot(&z),
            _ => f64::NAN,
        }
    }

    /// Per-component variance of the total increment, `1^T P^{-1} 1`.
    pub fn total_variance(&self) -> f64 {
        let ones = vec![1.0; self.cell_precision.nrows()];
        self.covariance(&ones, &ones)
    }

    /// One draw of the 3D cell increments, exactly `N(0, P^{-1})` per coordinate.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<[f64; 3]> {
        let m = self.cell_precision.nrows();
        let mut out = vec![[0.0; 3]; m];
        for d in 0..3 {
            let g = DVector::<f64>::from_fn(m, |_, _| rng.sample(StandardNormal));
            let z = self
                .cholesky
                .l_dirty()
                .tr_solve_lower_triangular(&g)
                .expect("cholesky factor has a positive diagonal");
            for (r, v) in z.iter().enumerate() {
                out[r][d] = *v;
            }
        }
        out
    }
}

pub fn increment_variance(xi: &ActivePeriod, u: &WeightVector) -> Result<f64> {
    let p = cell_precision(xi, u)?;
    let c = cholesky(p)?;
    let ones = DVector::<f64>::from_element(xi.cell_count(), 1.0);
    let y = c
        .l_dirty()
        .solve_lower_triangular(&ones)
        .ok_or(Error::NotPositiveDefinite { dim: xi.cell_count() })?;
    Ok(y.norm_squared())
}

pub fn sample_increments<R: Rng + ?Sized>(
    xi: &ActivePeriod,
    u: &WeightVector,
    rng: &mut R,
) -> Result<Vec<[f64; 3]>> {
    Ok(ClusterGaussian::new(xi, u)?.sample(rng))
}

/// Positions `omega(t) - omega(0)` at the requested times, interpolating
/// each cell by a Brownian bridge pinned to its sampled total.
pub fn refine_path<R: Rng + ?Sized>(
    cell_increments: &[[f64; 3]],
    xi: &ActivePeriod,
    times: &[f64],
    rng: &mut R,
) -> Result<Vec<[f64; 3]>> {
    let jumps = xi.jump_times();
    if cell_increments.len() != xi.cell_count() {
        return Err(Error::LengthMismatch { expected: xi.cell_count(), got: cell_increments.len() });
    }
    let span = xi.sigma_star();
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|a, b| times[*a].total_cmp(&times[*b]));
    for &t in times {
        if !(0.0..=span).contains(&t) {
            return Err(Error::OutOfRange { t, lo: 0.0, hi: span });
        }
    }

    let mut nodes = Vec::with_capacity(jumps.len());
    let mut acc = [0.0; 3];
    nodes.push(acc);
    for z in cell_increments {
        for d in 0..3 {
            acc[d] += z[d];
        }
        nodes.push(acc);
    }

    let mut out = vec![[0.0; 3]; times.len()];
    // Left anchor of the current cell: time and position, updated as the
    // bridge is revealed from left to right.
    let mut cell = 0usize;
    let mut left_t = jumps[0];
    let mut left_x = nodes[0];
    for idx in order {
        let t = times[idx];
        while cell + 1 < jumps.len() - 1 && t > jumps[cell + 1] {
            cell += 1;
            left_t = jumps[cell];
            left_x = nodes[cell];
        }
        let right_t = jumps[cell + 1];
        let right_x = nodes[cell + 1];
        let x = if t <= left_t {
            left_x
        } else if t >= right_t {
            right_x
        } else {
            let frac = (t - left_t) / (right_t - left_t);
            let var = (t - left_t) * (right_t - t) / (right_t - left_t);
            let sd = var.sqrt();
            let mut x = [0.0; 3];
            for d in 0..3 {
                let g: f64 = rng.sample(StandardNormal);
                x[d] = left_x[d] + frac * (right_x[d] - left_x[d]) + sd * g;
            }
            x
        };
        left_t = t.max(left_t);
        left_x = x;
        out[idx] = x;
    }
    Ok(out)
}

/// Proposal for one weight: density `sqrt(d) (1 + u^2 d)^{-3/2}` on `(0, inf)`.
pub fn envelope_draw<R: Rng + ?Sized>(delta: f64, rng: &mut R) -> f64 {
    let p: f64 = rng.sample(Open01);
    p / (delta.sqrt() * ((1.0 - p) * (1.0 + p)).sqrt())
}

fn envelope_weights<R: Rng + ?Sized>(xi: &ActivePeriod, rng: &mut R) -> WeightVector {
    WeightVector((0..xi.n()).map(|i| envelope_draw(xi.delta(i), rng)).collect())
}

/// Exact draw from the conditional weight law `beta(xi, du)` by rejection.
pub fn sample_weights<R: Rng + ?Sized>(xi: &ActivePeriod, rng: &mut R) -> Result<WeightVector> {
    sample_weights_capped(xi, DEFAULT_MAX_PROPOSALS, rng)
}

pub fn sample_weights_capped<R: Rng + ?Sized>(
    xi: &ActivePeriod,
    max_proposals: usize,
    rng: &mut R,
) -> Result<WeightVector> {
    let mut total_w = 0.0;
    for k in 0..max_proposals {
        let u = envelope_weights(xi, rng);
        let w = if xi.n() == 1 { 1.0 } else { envelope_ratio(xi, &u)? };
        if rng.random::<f64>() < w {
            return Ok(u);
        }
        total_w += w;
        if k + 1 == max_proposals {
            return Err(Error::RejectionCap {
                proposals: max_proposals,
                mean_acceptance: total_w / max_proposals as f64,
            });
        }
    }
    Err(Error::RejectionCap { proposals: 0, mean_acceptance: 0.0 })
}

/// `ln( C0^n prod delta_i^{-1/2} )`: log of the envelope integral, an upper bound on `ln F`.
pub fn log_f_upper_bound(xi: &ActivePeriod) -> f64 {
    (0..xi.n()).map(|i| C0.ln() - 0.5 * xi.delta(i).ln()).sum()
}

/// `ln( C0^n prod tau_i^{-1/2} )`, a lower bound on `ln F`.
pub fn log_f_lower_bound(xi: &ActivePeriod) -> f64 {
    xi.intervals().iter().map(|iv| C0.ln() - 0.5 * iv.length().ln()).sum()
}

/// Importance-sampling estimate of `F(xi) = C0^n ∫ Phi(xi, u) du`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FEstimate {
    /// `ln` of the estimate; finite even when the estimate overflows `f64`.
    pub log_estimate: f64,
    /// Standard error relative to the estimate.
    pub relative_se: f64,
}

impl FEstimate {
    pub fn estimate(&self) -> Estimate {
        let v = self.log_estimate.exp();
        Estimate::new(v, v * self.relative_se)
    }
}

pub fn estimate_f<R: Rng + ?Sized>(
    xi: &ActivePeriod,
    n_samples: usize,
    rng: &mut R,
) -> Result<FEstimate> {
    if n_samples < 2 {
        return Err(invalid("n_samples", "at least 2 samples are needed for a standard error"));
    }
    estimate_f_unchecked(xi, n_samples, rng)
}

/// As [`estimate_f`] but accepts a single sample (zero reported error).
pub(crate) fn estimate_f_unchecked<R: Rng + ?Sized>(
    xi: &ActivePeriod,
    n_samples: usize,
    rng: &mut R,
) -> Result<FEstimate> {
    let log_env = log_f_upper_bound(xi);
    if xi.n() == 1 {
        // One interval is its own death cell: the envelope is exact.
        return Ok(FEstimate { log_estimate: log_env, relative_se: 0.0 });
    }
    let mut ws = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let u = envelope_weights(xi, rng);
        ws.push(envelope_ratio(xi, &u)?);
    }
    let m = crate::stats::mean(&ws);
    let rel = if n_samples > 1 && m > 0.0 {
        (crate::stats::variance(&ws) / n_samples as f64).sqrt() / m
    } else {
        0.0
    };
    Ok(FEstimate { log_estimate: log_env + m.ln(), relative_se: rel })
}
