use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("numeric failure: {message} (residual {residual:.3e})")]
    Numeric { message: String, residual: f64 },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("player {player} failed at iteration {iteration}: {source}")]
    Oracle {
        player: usize,
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invariant violated at iteration {iteration}: {message}")]
    Invariant {
        iteration: usize,
        message: String,
        dump: String,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code for the command-line front end: 2 for configuration
    /// problems, 3 for numeric aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Dimension(_)
            | Error::Unsupported(_)
            | Error::Validation(_)
            | Error::Parse(_)
            | Error::Json(_) => 2,
            Error::Numeric { .. }
            | Error::Domain(_)
            | Error::Oracle { .. }
            | Error::Invariant { .. } => 3,
            Error::Io(_) | Error::Csv(_) => 1,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
