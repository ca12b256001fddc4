use crate::model::ConfigHash;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("invalid mask: {0}")]
    Mask(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("config hash mismatch: expected {expected}, found {actual}")]
    HashMismatch {
        expected: ConfigHash,
        actual: ConfigHash,
    },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("invalid plan: {field}: {reason}")]
    Plan { field: &'static str, reason: String },

    #[error("non-finite attention value in unit {unit}")]
    NonFiniteAttention { unit: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("pruning ratio {0} outside [0, 1]")]
    Ratio(f64),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
