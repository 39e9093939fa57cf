use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bucket parameters: {0}")]
    InvalidBucket(String),

    #[error("offload requested with n_bar={n_bar} < P={cost}")]
    InsufficientTokens { n_bar: u64, cost: u64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("training diverged at sync {sync}, step {step}: loss={loss}")]
    Divergence { sync: usize, step: usize, loss: f64 },

    #[error("value iteration did not converge after {sweeps} sweeps (residual {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },

    #[error("MDP thresholds not monotone at n_bar={n_bar}: {lower} < {higher}")]
    NotMonotone { n_bar: u64, lower: f64, higher: f64 },

    #[error("policy violated the token bucket at arrival {index} (n_bar={n_bar})")]
    PolicyViolation { index: usize, n_bar: u64 },

    #[error("malformed {what} at line {line}: {msg}")]
    Parse {
        what: &'static str,
        line: usize,
        msg: String,
    },

    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable identifier used in machine-readable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidBucket(_) => "invalid_bucket",
            Error::InsufficientTokens { .. } => "insufficient_tokens",
            Error::InvalidConfig(_) => "invalid_config",
            Error::InvalidDistribution(_) => "invalid_distribution",
            Error::Empty(_) => "empty",
            Error::Dimension { .. } => "dimension",
            Error::Divergence { .. } => "divergence",
            Error::NoConvergence { .. } => "no_convergence",
            Error::NotMonotone { .. } => "not_monotone",
            Error::PolicyViolation { .. } => "policy_violation",
            Error::Parse { .. } => "parse",
            Error::MissingArtifact(_) => "missing_artifact",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
        }
    }
}
