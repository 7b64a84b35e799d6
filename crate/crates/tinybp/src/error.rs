use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit codes:
/// usage/config problems (1), numerical failures (2), budget violations (3).
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shape mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration, graph, or argument value.
    #[error("invalid: {0}")]
    Invalid(String),

    /// NaN or Inf encountered where a finite value is required.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Autodiff misuse (non-scalar backward, consumed tape, missing grads).
    #[error("autodiff error: {0}")]
    Autodiff(String),

    /// Quantization failure (degenerate scale, requant multiplier out of range).
    #[error("quantization error: {0}")]
    Quant(String),

    /// A hard memory budget was exceeded.
    #[error("budget exceeded: need {total} bytes, budget {budget} bytes")]
    Budget { total: u64, budget: u64 },

    /// Malformed serialized input (container, NDJSON record, cache file).
    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
