use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path} at byte offset {offset}: {detail}")]
    Format {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("gradient check failed for: {0}")]
    GradientCheck(String),

    #[error("checkpoint incompatible with config: {0}")]
    Incompatible(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, offset: u64, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset,
            detail: detail.into(),
        }
    }

    /// Process exit status for the CLI: 1 usage/config, 2 data/format, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Dimension { .. } => 1,
            Error::Format { .. }
            | Error::Data(_)
            | Error::LabelRange { .. }
            | Error::Incompatible(_)
            | Error::Io { .. } => 2,
            Error::Divergence(_) | Error::NonFinite(_) | Error::GradientCheck(_) => 3,
        }
    }
}
