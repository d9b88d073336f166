use thiserror::Error;

/// Errors produced across the selection pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular design: {0}")]
    SingularDesign(String),

    #[error("IRLS failed to converge after {iterations} iterations (max |delta| = {last_delta:.3e})")]
    IrlsNonConvergence { iterations: usize, last_delta: f64 },

    #[error("projection failed for draw {draw}: {source}")]
    DrawProjection {
        draw: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("empty cluster after {restarts} k-means restarts")]
    EmptyCluster { restarts: usize },

    #[error("search failed at size {size}: {reason}")]
    SearchFailure { size: usize, reason: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
