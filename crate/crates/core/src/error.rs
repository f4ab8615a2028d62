//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by any stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape or dimension mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// A forward op produced NaN or Inf from finite inputs, or backward
    /// was misused (non-scalar loss, double backward, detached graph).
    #[error("autodiff error: {0}")]
    Autodiff(String),

    /// CTC target cannot be aligned within the given frame budget.
    /// Reports the offending batch elements.
    #[error("infeasible CTC target for batch element(s) {elements:?}: {reason}")]
    InfeasibleTarget {
        elements: Vec<usize>,
        reason: String,
    },

    /// Invalid model or search configuration.
    #[error("invalid config: {0}")]
    Config(String),

    /// Quantizer used before calibration, or with invalid parameters.
    #[error("quantizer error: {0}")]
    Quant(String),

    /// Latency table has no entry for the requested op signature.
    #[error("latency table miss: {0}")]
    LatencyMiss(String),

    /// Training schedule cannot complete (e.g. not enough epochs to
    /// remove every skip connection).
    #[error("infeasible schedule: {0}")]
    Schedule(String),

    /// Checkpoint is malformed, truncated, or from an unknown version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Simulator misuse (constant signal, empty dwell range, ...).
    #[error("simulation error: {0}")]
    Sim(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
