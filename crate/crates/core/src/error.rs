use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("backward requires a 1x1 loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at {0}")]
    NonFiniteLoss(String),

    #[error("invalid path: {0}")]
    InvalidPath(String),

    #[error("invalid slate: {0}")]
    InvalidSlate(String),

    #[error("path enumeration too large: C({0}, {1}) exceeds 10^6")]
    TooManyPaths(usize, usize),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid request {request_id}: {reason}")]
    Request { request_id: u64, reason: String },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("no admissible vertex at decode step {0}")]
    NoAdmissibleVertex(usize),

    #[error("temperature must be positive, got {0}")]
    Temperature(f64),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Numerical failures (exit code 2) as opposed to usage/config errors.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteGradient(_) | Error::NonFiniteLoss(_) | Error::NoAdmissibleVertex(_)
        )
    }
}
