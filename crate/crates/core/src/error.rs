use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("infeasible subsampling target at cell (d={d}, z={z}): need {needed} records, have {available}")]
    Infeasible {
        d: usize,
        z: usize,
        needed: usize,
        available: usize,
    },

    #[error("cold stratum {0}: no running mean recorded yet")]
    ColdStratum(usize),

    #[error("numerical abort at step {step}: {what}")]
    NumericalAbort { step: usize, what: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn format(path: impl AsRef<std::path::Path>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            msg: msg.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } | Error::Format { .. } | Error::Infeasible { .. } => 3,
            Error::NumericalAbort { .. } => 4,
            Error::Contract(_) => 5,
            Error::Validation(_) | Error::Dimension(_) => 2,
            Error::State(_) | Error::ColdStratum(_) | Error::MetricUndefined(_) => 3,
        }
    }
}
