use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("runaway cluster: population history exceeded {cap} individuals")]
    RunawayCluster { cap: usize },

    #[error("malformed cluster: {0}")]
    MalformedCluster(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("matrix of dimension {dim} is not positive definite after jitter")]
    NotPositiveDefinite { dim: usize },

    #[error("rejection sampler gave up after {proposals} proposals (mean acceptance {mean_acceptance:.3e})")]
    RejectionCap { proposals: usize, mean_acceptance: f64 },

    #[error("root not bracketed on [{lo}, {hi}]: q(lo) = {q_lo}, q(hi) = {q_hi}")]
    NotBracketed { lo: f64, hi: f64, q_lo: f64, q_hi: f64 },

    #[error("sample budget of {budget} exhausted: lambda = {lambda}, q = {q} +/- {q_se}")]
    BudgetExhausted { budget: usize, lambda: f64, q: f64, q_se: f64 },

    #[error("degenerate importance pool: all {size} weights vanish")]
    DegeneratePool { size: usize },

    #[error("time {t} outside [{lo}, {hi}]")]
    OutOfRange { t: f64, lo: f64, hi: f64 },
}

impl Error {
    /// Stable machine-readable identifier used by the CLI.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidParameter { .. } => "invalid_parameter",
            Error::RunawayCluster { .. } => "runaway_cluster",
            Error::MalformedCluster(_) => "malformed_cluster",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::NotPositiveDefinite { .. } => "not_positive_definite",
            Error::RejectionCap { .. } => "rejection_cap",
            Error::NotBracketed { .. } => "root_not_bracketed",
            Error::BudgetExhausted { .. } => "budget_exhausted",
            Error::DegeneratePool { .. } => "degenerate_pool",
            Error::OutOfRange { .. } => "out_of_range",
        }
    }
}

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter { name, reason: reason.into() }
}

pub(crate) fn require_positive(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(invalid(name, format!("must be positive and finite, got {value}")))
    }
}
