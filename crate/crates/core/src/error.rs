use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("symbol {symbol:?} is not in the vocabulary{}", context_suffix(.context))]
    Vocabulary { symbol: String, context: String },

    #[error("sequence of {len} tokens exceeds max_len {max_len}")]
    Length { len: usize, max_len: usize },

    #[error(
        "enumerating {vocab}^{len} responses exceeds the cap of {cap}; use the Monte-Carlo estimator instead"
    )]
    EnumerationCap { vocab: usize, len: usize, cap: u64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("estimation failed: {0}")]
    Estimation(String),

    #[error("{name} violated: lhs={lhs:e}, rhs={rhs:e}, residual={residual:e}")]
    IdentityViolation {
        name: &'static str,
        lhs: f64,
        rhs: f64,
        residual: f64,
    },

    #[error("training diverged at step {}: {}", .0.step, .0.reason)]
    Divergence(Box<DivergenceReport>),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn context_suffix(context: &str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" ({context})")
    }
}

/// What the trainer hands back when a loss or gradient stops being finite.
#[derive(Debug, Clone)]
pub struct DivergenceReport {
    pub step: usize,
    pub reason: String,
    /// Parameters after the last step whose loss and gradient were finite.
    pub last_valid_params: Vec<f64>,
    pub records: Vec<crate::trainer::RunRecord>,
}
