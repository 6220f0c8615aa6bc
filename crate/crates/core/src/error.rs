use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor shape did not satisfy an operation's contract.
    #[error("dimension error on axis {axis}: {message}")]
    Dimension { axis: usize, message: String },

    #[error("cannot reduce over an empty axis {axis}")]
    EmptyReduction { axis: usize },

    #[error("non-finite value at coordinate {index} ({context})")]
    NonFinite { index: usize, context: String },

    #[error("sequence too short: {what} needs at least {needed} frames, got {got}")]
    SequenceTooShort {
        what: String,
        needed: usize,
        got: usize,
    },

    #[error("template/sequence alignment error: {0}")]
    Alignment(String),

    #[error("window error: sequence of {n} frames cannot hold a window of length {window}")]
    Window { n: usize, window: usize },

    #[error("batch composition error: {0}")]
    BatchComposition(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate frame: silhouette has no foreground pixels")]
    DegenerateFrame,

    #[error("ingestion error: could not parse {} path(s), first: {}", .paths.len(), .paths.first().map(|p| p.display().to_string()).unwrap_or_default())]
    Ingestion { paths: Vec<PathBuf> },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image error in {path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn dim(axis: usize, message: impl Into<String>) -> Self {
        Error::Dimension {
            axis,
            message: message.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Process exit code for this error: 2 for configuration/input problems,
    /// 1 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } => 1,
            _ => 2,
        }
    }
}
