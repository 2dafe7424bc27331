use std::io;

use thiserror::Error;

/// Every failure the library can surface.
///
/// Variants are grouped by [`ErrorCategory`], which the command-line front end
/// maps onto process exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sequence too long: {len} tokens exceeds the limit of {max}")]
    SequenceLength { len: usize, max: usize },
    #[error("routing configuration: {0}")]
    RoutingConfig(String),
    #[error("gating: {0}")]
    Gating(String),
    #[error("routing: {0}")]
    Routing(String),
    #[error("expert budget exceeded: {expert_bytes} bytes > {limit_bytes} bytes allowed")]
    Budget { expert_bytes: usize, limit_bytes: usize },
    #[error("unknown expert id {0}")]
    Lookup(u32),
    #[error("corrupt checkpoint: {0}")]
    Corruption(String),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("training diverged at step {step}")]
    Divergence { step: usize },
    #[error("every target position is masked")]
    DegenerateBatch,
    #[error("backbone is frozen; parameters are read-only")]
    Frozen,
    #[error("workload: {0}")]
    Workload(String),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Coarse error classes used for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Bad input data, configuration, routing or lookups.
    Data,
    /// Training produced non-finite values.
    Divergence,
    /// Checkpoint integrity or version failures.
    Corruption,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Divergence { .. } => ErrorCategory::Divergence,
            Error::Corruption(_) | Error::Version { .. } => ErrorCategory::Corruption,
            _ => ErrorCategory::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
