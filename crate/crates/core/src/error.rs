use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    Invalid { op: &'static str, detail: String },

    #[error("non-finite value after {op}")]
    NonFinite { op: String },

    #[error("config error at line {line}, field `{field}`: {detail}")]
    Config {
        line: usize,
        field: String,
        detail: String,
    },

    #[error("numerical check failed: {0}")]
    Numerical(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(line: usize, field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            line,
            field: field.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code for the command-line surface.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape { .. } | Error::Invalid { .. } | Error::Config { .. } => 1,
            Error::NonFinite { .. } | Error::Numerical(_) => 2,
            Error::Checkpoint(_) | Error::Data(_) | Error::Io(_) => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
