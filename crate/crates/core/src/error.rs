use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid environment: {0}")]
    InvalidEnvironment(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("position ({px}, {py}) is outside the grid bounds")]
    OutOfBounds { px: f64, py: f64 },

    #[error("CFL violation: dt = {dt} exceeds limit {limit}")]
    Cfl { dt: f64, limit: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("sampling exhausted after {attempts} attempts ({accepted} of {requested} accepted)")]
    SamplingExhausted {
        attempts: usize,
        accepted: usize,
        requested: usize,
    },

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit status for this error: 2 for configuration and input
    /// problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Degenerate(_)
            | Error::OutOfBounds { .. }
            | Error::Cfl { .. }
            | Error::NonFinite(_)
            | Error::SamplingExhausted { .. }
            | Error::Diverged { .. } => 3,
            _ => 2,
        }
    }
}
