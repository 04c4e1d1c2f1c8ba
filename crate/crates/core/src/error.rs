use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("sequence too short: length {len} is smaller than kernel {kernel}")]
    SequenceTooShort { len: usize, kernel: usize },

    #[error("alignment mismatch: text branch yields length {text}, audio branch yields {audio}")]
    AlignmentMismatch { text: usize, audio: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("{path}:{line}: {msg}")]
    Line { path: PathBuf, line: usize, msg: String },

    #[error("correlation undefined: {0} has zero variance")]
    ZeroVariance(&'static str),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("run with seed {seed} failed: {source}")]
    Seed {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
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
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
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

    /// Errors caused by bad inputs or configuration rather than by a run going wrong.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Shape { .. }
            | Error::SequenceTooShort { .. }
            | Error::AlignmentMismatch { .. }
            | Error::Config(_)
            | Error::Data(_)
            | Error::Line { .. }
            | Error::Json(_) => true,
            Error::Seed { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
