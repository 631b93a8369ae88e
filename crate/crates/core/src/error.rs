use thiserror::Error;

/// Errors raised across the estimation, selection, and averaging stack.
#[derive(Debug, Error)]
pub enum MsarError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("explicit Kronecker product of shape {rows}x{cols} needs {bytes} bytes, above the {cap} byte cap")]
    KronTooLarge {
        rows: usize,
        cols: usize,
        bytes: u128,
        cap: u128,
    },

    #[error("invalid spatial weights: {0}")]
    InvalidWeights(String),

    #[error("row {0} has no neighbours and cannot be row-normalized")]
    IslandRow(usize),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("spectral radius of D is {0:.6}, must be below 1")]
    UnstableD(f64),

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("ill-conditioned implicit Jacobian system (condition number {condition:.3e})")]
    IllConditioned { condition: f64 },

    #[error("estimation did not converge after {iterations} iterations (last change {last_change:.3e})")]
    NotConverged { iterations: usize, last_change: f64 },

    #[error("{0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, MsarError>;
