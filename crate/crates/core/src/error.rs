use std::path::PathBuf;

/// Broad failure classes, used by front-ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
    Io,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid price at line {line}: {message}")]
    InvalidPrice { line: usize, message: String },

    #[error("assets rejected for insufficient history (need {required} observations): {}", symbols.join(","))]
    RejectedAssets { symbols: Vec<String>, required: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error in {op}: {message}")]
    Domain { op: &'static str, message: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible risk target: {0}")]
    Infeasible(String),

    #[error("training diverged at epoch {epoch}: {message}")]
    Diverged { epoch: usize, message: String },

    #[error("backward already called on this tape; reset it first")]
    BackwardTwice,

    #[error("unsupported format: {0}")]
    Format(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Parse { .. }
            | Error::InvalidPrice { .. }
            | Error::RejectedAssets { .. }
            | Error::InsufficientData(_)
            | Error::Format(_)
            | Error::Csv(_) => ErrorKind::Data,
            Error::InvalidSplit(_) | Error::InvalidArgument(_) | Error::Json(_) => {
                ErrorKind::Config
            }
            Error::Shape(_)
            | Error::Domain { .. }
            | Error::NonFinite(_)
            | Error::Infeasible(_)
            | Error::Diverged { .. }
            | Error::BackwardTwice => ErrorKind::Numerical,
            Error::Io { .. } => ErrorKind::Io,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
