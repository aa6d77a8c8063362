use thiserror::Error;

/// Errors produced by the editing pipeline and its building blocks.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("step {step} is terminal and has no successor")]
    NoSuccessor { step: usize },

    #[error("velocity is undefined at sigma = 0 (step {step})")]
    UndefinedVelocity { step: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("extended attention requires a source partition")]
    MissingSource,

    #[error("attention weight {name} must be positive, got {value}")]
    NonPositiveWeight { name: &'static str, value: f64 },

    #[error("no sign change on [{lo}, {hi}]: f(lo) = {f_lo}, f(hi) = {f_hi}")]
    Bracketing {
        lo: f64,
        hi: f64,
        f_lo: f64,
        f_hi: f64,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("schema error in record {index}: {message}")]
    Schema { index: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by user-supplied data or configuration, as
    /// opposed to a broken internal invariant.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidSchedule(_)
                | Error::Config(_)
                | Error::Schema { .. }
                | Error::InvalidInput(_)
                | Error::Io(_)
                | Error::Json(_)
                | Error::Degenerate(_)
                | Error::Bracketing { .. }
                | Error::NonPositiveWeight { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
