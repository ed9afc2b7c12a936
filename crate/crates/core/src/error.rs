use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A mathematical precondition was violated (zero norm, negative std, ...).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("no equilibrium: lambda is zero")]
    NoEquilibrium,

    /// A prediction needs a gradient statistic that was not supplied.
    #[error("missing statistic: requires {0}")]
    MissingStat(&'static str),

    /// An API was called out of order, e.g. a backward pass without a forward cache.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("non-finite parameter at step {step}, unit {unit}")]
    NonFinite { step: usize, unit: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub(crate) fn check_dims(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}
