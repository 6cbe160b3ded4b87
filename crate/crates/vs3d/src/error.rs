use thiserror::Error;

/// Library-wide error type.
#[derive(Debug, Error)]
pub enum VsError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("tape: {0}")]
    Tape(String),
    #[error("no calibrated embedding cached for step {step}")]
    MissingPhi { step: usize },
    #[error("numerical abort at {context}: {detail}")]
    Numerical { context: String, detail: String },
    #[error("sampler: {0}")]
    Sampler(String),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VsError>;
