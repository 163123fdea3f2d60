use std::io::{self, BufReader};

use polaron_core::finite_volume::{estimate_finite_t, Functional};
use polaron_core::oracle_mcmc::{self, ChainOptions};
use polaron_core::renewal::{
    normalized_increments, sample_polaron_path, sample_stationary_window, sigma2_on_pool, TiltedClusterSampler,
};
use polaron_core::streams::{Purpose, RandomStreams};
use polaron_core::tilting::{self, ClusterPool, PoolOptions, QOptions, SolveOptions};
use polaron_core::{stats, Error};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Flags, UsageError};
use crate::extract;
use crate::output::Emitter;

pub enum Failure {
    Usage(UsageError),
    Module(Error),
    Io(io::Error),
    Checks,
}

impl From<UsageError> for Failure {
    fn from(e: UsageError) -> Self {
        Failure::Usage(e)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Module(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Io(e)
    }
}

type Outcome = Result<(), Failure>;

const DEFAULT_TOL: f64 = 0.01;
const DEFAULT_SOLVE_BUDGET: usize = 4_000_000;
const DEFAULT_POOL: usize = 100_000;

fn start(flags: &Flags) -> Result<(u64, RandomStreams, Emitter), Failure> {
    let seed = flags.require_seed()?;
    let em = Emitter::open(flags.out.as_deref(), Some(seed))?;
    Ok((seed, RandomStreams::new(seed), em))
}

/// The tilt from `--lambda`, or solved on its own derived streams.
fn tilt(flags: &Flags, alpha: f64, streams: &RandomStreams, em: &mut Emitter) -> Result<f64, Failure> {
    if let Some(l) = flags.lambda {
        return Ok(l);
    }
    let tol = flags.tol.unwrap_or(DEFAULT_TOL);
    let sol = tilting::solve_lambda(alpha, tol, DEFAULT_SOLVE_BUDGET, &streams.derive(1), &SolveOptions::default())?;
    em.emit("tilt_solution", &sol)?;
    Ok(sol.lambda)
}

pub fn solve_lambda(flags: &Flags) -> Outcome {
    let alpha = flags.require_alpha()?;
    let (_, streams, mut em) = start(flags)?;
    let tol = flags.tol.unwrap_or(DEFAULT_TOL);
    let budget = flags.samples.unwrap_or(DEFAULT_SOLVE_BUDGET);
    let sol = tilting::solve_lambda(alpha, tol, budget, &streams, &SolveOptions::default())?;
    em.emit("tilt_solution", &sol)?;
    Ok(())
}

pub fn estimate_q(flags: &Flags) -> Outcome {
    let alpha = flags.require_alpha()?;
    let (_, streams, mut em) = start(flags)?;
    let lambda = flags.lambda.unwrap_or(0.0);
    let n = flags.samples.unwrap_or(100_000);
    let rep = tilting::estimate_q(alpha, lambda, n, &streams, &QOptions::default())?;
    em.emit("q_estimate", &rep)?;
    Ok(())
}

#[derive(Serialize)]
struct CrossCheck {
    alpha: f64,
    lambda: f64,
    half_width: f64,
    replicas: usize,
    /// Empirical variance per component.
    variance: [stats::Estimate; 3],
    /// Mean over replicas of the component-averaged square.
    pooled_variance: stats::Estimate,
    kurtosis: [f64; 3],
    /// Correlations of components (0,1), (0,2), (1,2).
    correlation: [f64; 3],
}

pub fn sigma2(flags: &Flags) -> Outcome {
    let alpha = flags.require_alpha()?;
    let (_, streams, mut em) = start(flags)?;
    let lambda = tilt(flags, alpha, &streams, &mut em)?;
    let pool = ClusterPool::build(alpha, flags.pool.unwrap_or(DEFAULT_POOL), PoolOptions::default(), &streams)?;
    let rep = sigma2_on_pool(&pool, lambda, &streams)?;
    em.emit("sigma2", &rep)?;
    if let Some(replicas) = flags.samples {
        let half = flags.t_horizon.unwrap_or(200.0);
        let sampler = TiltedClusterSampler::new(pool, lambda)?;
        let z = normalized_increments(&sampler, half, sampler.default_burn_in(), replicas, &streams)?;
        let comp = |d: usize| z.iter().map(|x| x[d]).collect::<Vec<f64>>();
        let cols = [comp(0), comp(1), comp(2)];
        let sq = |c: &Vec<f64>| c.iter().map(|x| x * x).collect::<Vec<f64>>();
        let all: Vec<f64> = z.iter().map(|x| (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]) / 3.0).collect();
        let check = CrossCheck {
            alpha,
            lambda,
            half_width: half,
            replicas,
            variance: [stats::mean_se(&sq(&cols[0])), stats::mean_se(&sq(&cols[1])), stats::mean_se(&sq(&cols[2]))],
            pooled_variance: stats::mean_se(&all),
            kurtosis: [stats::kurtosis(&cols[0]), stats::kurtosis(&cols[1]), stats::kurtosis(&cols[2])],
            correlation: [
                stats::correlation(&cols[0], &cols[1]),
                stats::correlation(&cols[0], &cols[2]),
                stats::correlation(&cols[1], &cols[2]),
            ],
        };
        em.emit("sigma2_crosscheck", &check)?;
    }
    Ok(())
}

pub fn sample_path(flags: &Flags) -> Outcome {
    let alpha = flags.require_alpha()?;
    let (_, streams, mut em) = start(flags)?;
    let lambda = tilt(flags, alpha, &streams, &mut em)?;
    let half = flags.t_horizon.unwrap_or(10.0);
    let cells = flags.grid_cells.unwrap_or(200);
    let sampler = TiltedClusterSampler::build(alpha, lambda, flags.pool.unwrap_or(DEFAULT_POOL), &streams)?;
    let mut rng = streams.stream(Purpose::Window, 0);
    let cfg = sample_stationary_window(&sampler, half, sampler.default_burn_in(), &mut rng)?;
    em.emit("configuration", &cfg.record())?;
    let times: Vec<f64> = (0..=cells).map(|i| -half + 2.0 * half * i as f64 / cells as f64).collect();
    let mut prng = streams.stream(Purpose::Path, 0);
    let path = sample_polaron_path(&cfg, &times, &mut prng)?;
    em.emit("path", &path)?;
    Ok(())
}

pub fn finite_t(flags: &Flags) -> Outcome {
    let alpha = flags.require_alpha()?;
    let (_, streams, mut em) = start(flags)?;
    let t = flags.t_horizon.unwrap_or(2.0);
    let functional = match flags.threshold {
        Some(threshold) => Functional::Indicator { a: -t, b: t, threshold },
        None => Functional::SecondMoment { a: -t, b: t },
    };
    let rep = estimate_finite_t(alpha, t, functional, flags.samples.unwrap_or(100_000), &streams)?;
    em.emit("finite_t", &rep)?;
    Ok(())
}

#[derive(Serialize)]
struct Combined {
    alpha: f64,
    t_horizon: f64,
    m: usize,
    chains: usize,
    second_moment: stats::Estimate,
    /// Second moment divided by `2T`.
    normalized: stats::Estimate,
    reliable: bool,
}

pub fn oracle(flags: &Flags, traces: bool) -> Outcome {
    let alpha = flags.alpha.unwrap_or(0.5);
    let (_, streams, mut em) = start(flags)?;
    let t = flags.t_horizon.unwrap_or(2.0);
    let m = flags.grid_cells.unwrap_or(128);
    let chains = flags.chains.unwrap_or(4);
    let steps = flags.samples.unwrap_or(1_000_000).div_ceil(chains);
    let options = ChainOptions { keep_traces: traces, ..Default::default() };
    let reports = (0..chains)
        .into_par_iter()
        .map(|k| {
            let mut rng = streams.stream(Purpose::Chain, k as u64);
            oracle_mcmc::run_chain(alpha, t, m, steps, 0.3, &options, &mut rng)
        })
        .collect::<polaron_core::Result<Vec<_>>>()?;
    for r in &reports {
        em.emit("chain", r)?;
    }
    let est = oracle_mcmc::combine_chains(&reports);
    let combined = Combined {
        alpha,
        t_horizon: t,
        m,
        chains,
        second_moment: est,
        normalized: stats::Estimate::new(est.value / (2.0 * t), est.std_error / (2.0 * t)),
        reliable: reports.iter().all(|r| r.reliable),
    };
    em.emit("chain_combined", &combined)?;
    Ok(())
}

#[derive(Serialize)]
struct ChecksSummary {
    passed: bool,
    lyapunov_failures: usize,
    drift_failures: usize,
    det_lemma_failures: usize,
}

pub fn checks(flags: &Flags) -> Outcome {
    let seed = flags.seed.unwrap_or(0);
    let mut em = Emitter::open(flags.out.as_deref(), Some(seed))?;
    let alphas = match flags.alpha {
        Some(a) => vec![a],
        None => vec![0.05, 0.25, 1.0],
    };
    let n_max = flags.samples.unwrap_or(10_000);
    let mut summary = ChecksSummary { passed: true, lyapunov_failures: 0, drift_failures: 0, det_lemma_failures: 0 };
    for &a in &alphas {
        let ly = tilting::lyapunov_check_terminal(a, n_max)?;
        summary.lyapunov_failures += usize::from(!ly.passed);
        em.emit("lyapunov_check", &ly)?;
        let dr = tilting::drift_check_free(a, None, n_max)?;
        summary.drift_failures += usize::from(!dr.passed);
        em.emit("drift_check", &dr)?;
    }
    let streams = RandomStreams::new(seed);
    for dim in 1..=8 {
        let mut rng = streams.stream(Purpose::Matrices, dim as u64);
        let rep = oracle_mcmc::det_lemma_check(dim, 1250, &mut rng)?;
        summary.det_lemma_failures += rep.identity_violations + rep.inequality_violations;
        em.emit("det_lemma", &rep)?;
    }
    summary.passed = summary.lyapunov_failures + summary.drift_failures + summary.det_lemma_failures == 0;
    em.emit("checks_summary", &summary)?;
    if summary.passed {
        Ok(())
    } else {
        Err(Failure::Checks)
    }
}

pub fn extract_csv(
    input: Option<&std::path::Path>,
    out: Option<&std::path::Path>,
    record: Option<&str>,
    explode: Option<&str>,
) -> Outcome {
    let reader: Box<dyn io::BufRead> = match input {
        Some(p) if p != std::path::Path::new("-") => Box::new(BufReader::new(std::fs::File::open(p)?)),
        _ => Box::new(BufReader::new(io::stdin())),
    };
    let writer: Box<dyn io::Write> = match out {
        Some(p) => Box::new(std::fs::File::create(p)?),
        None => Box::new(io::stdout()),
    };
    extract::extract(reader, writer, record, explode)
        .map(|_| ())
        .map_err(|e| Failure::Usage(UsageError::new("input", e.0)))
}
