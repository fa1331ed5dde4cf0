use thiserror::Error;

/// Failure modes shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid user-supplied configuration (bounds, sizes, scenario fields).
    #[error("configuration error: {0}")]
    Config(String),
    /// A caller broke an operation's precondition (dimension mismatch, bad basis).
    #[error("contract violation: {0}")]
    Contract(String),
    /// A numerical solver could not produce a valid result.
    #[error("solver failure at t = {t}: {message}")]
    Solver { t: f64, message: String },
    /// A computed quantity overflowed or left its representable range.
    #[error("range error: {0}")]
    Range(String),
    /// A result violated a configured acceptance threshold.
    #[error("validation failed: {0}")]
    Validation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn solver(t: f64, msg: impl Into<String>) -> Self {
        Error::Solver {
            t,
            message: msg.into(),
        }
    }
}
