//! Experiment parameters from flags and an optional flat `key=value` file.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;

#[derive(Debug)]
pub struct UsageError {
    pub field: String,
    pub message: String,
}

impl UsageError {
    pub fn new(field: &str, message: impl Into<String>) -> Self {
        Self { field: field.to_string(), message: message.into() }
    }
}

/// Shared flags. Every field is optional so file values can fill the gaps.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// Coupling constant.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Time horizon T (half-width of the window for windowed commands).
    #[arg(long = "t-horizon", global = true)]
    pub t_horizon: Option<f64>,
    /// Tilt override; solved for when absent.
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    /// Sample count (configurations, clusters, replicas or chain steps).
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    /// Cluster pool size.
    #[arg(long, global = true)]
    pub pool: Option<usize>,
    /// Grid cells for path output or the chain oracle.
    #[arg(long = "grid-cells", global = true)]
    pub grid_cells: Option<usize>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; falls back to POLARON_THREADS.
    #[arg(long, global = true, env = "POLARON_THREADS")]
    pub threads: Option<usize>,
    /// Output file for JSON lines (appended); stdout when absent.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Flat key=value file; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Target accuracy for the tilt solver.
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    /// Independent chains for the oracle.
    #[arg(long, global = true)]
    pub chains: Option<usize>,
    /// Threshold for the indicator functional in finite-t.
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, UsageError> {
    value
        .parse()
        .map_err(|_| UsageError::new(key, format!("cannot parse {value:?}")))
}

impl Flags {
    /// Fills unset fields from the config file, if one was given.
    pub fn resolve(mut self) -> Result<Self, UsageError> {
        if let Some(path) = self.config.clone() {
            let file = read_file(&path)?;
            self.merge_from(file);
        }
        self.validate()?;
        Ok(self)
    }

    fn merge_from(&mut self, file: Flags) {
        macro_rules! fill {
            ($($f:ident),*) => { $( if self.$f.is_none() { self.$f = file.$f; } )* };
        }
        fill!(alpha, t_horizon, lambda, samples, pool, grid_cells, seed, threads, out, tol, chains, threshold);
    }

    fn validate(&self) -> Result<(), UsageError> {
        let positive = |name: &str, v: Option<f64>| match v {
            Some(x) if !(x.is_finite() && x > 0.0) => Err(UsageError::new(name, format!("must be positive, got {x}"))),
            _ => Ok(()),
        };
        positive("alpha", self.alpha)?;
        positive("t-horizon", self.t_horizon)?;
        positive("tol", self.tol)?;
        positive("threshold", self.threshold)?;
        if let Some(l) = self.lambda {
            if !(l.is_finite() && l >= 0.0) {
                return Err(UsageError::new("lambda", format!("must be nonnegative, got {l}")));
            }
        }
        let at_least = |name: &str, v: Option<usize>, min: usize| match v {
            Some(x) if x < min => Err(UsageError::new(name, format!("must be at least {min}, got {x}"))),
            _ => Ok(()),
        };
        at_least("samples", self.samples, 2)?;
        at_least("pool", self.pool, 1000)?;
        at_least("grid-cells", self.grid_cells, 2)?;
        at_least("threads", self.threads, 1)?;
        at_least("chains", self.chains, 1)?;
        Ok(())
    }

    pub fn require_seed(&self) -> Result<u64, UsageError> {
        self.seed.ok_or_else(|| UsageError::new("seed", "required for commands that emit results"))
    }

    pub fn require_alpha(&self) -> Result<f64, UsageError> {
        self.alpha.ok_or_else(|| UsageError::new("alpha", "required"))
    }
}

fn read_file(path: &Path) -> Result<Flags, UsageError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| UsageError::new("config", format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_config(text: &str) -> Result<Flags, UsageError> {
    let mut f = Flags::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| UsageError::new("config", format!("line {}: expected key=value", lineno + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        match key.replace('_', "-").as_str() {
            "alpha" => f.alpha = Some(parse(key, value)?),
            "t-horizon" => f.t_horizon = Some(parse(key, value)?),
            "lambda" => f.lambda = Some(parse(key, value)?),
            "samples" => f.samples = Some(parse(key, value)?),
            "pool" => f.pool = Some(parse(key, value)?),
            "grid-cells" => f.grid_cells = Some(parse(key, value)?),
            "seed" => f.seed = Some(parse(key, value)?),
            "threads" => f.threads = Some(parse(key, value)?),
            "out" => f.out = Some(PathBuf::from(value)),
            "tol" => f.tol = Some(parse(key, value)?),
            "chains" => f.chains = Some(parse(key, value)?),
            "threshold" => f.threshold = Some(parse(key, value)?),
            _ => return Err(UsageError::new(key, "unknown config key")),
        }
    }
    Ok(f)
}
