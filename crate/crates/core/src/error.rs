use std::path::PathBuf;

/// Errors surfaced by the segmentation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum SegError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported or malformed image {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    /// A caller broke a precondition (shape mismatch, non-finite data, stale state).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Multi-IGLIM could not produce a usable partition.
    #[error("initialization failed: {0}")]
    Init(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("solver failure: {0}")]
    Solver(String),
}

impl SegError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SegError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        SegError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            SegError::Config(_) => 2,
            SegError::Io { .. } | SegError::Format { .. } => 3,
            SegError::Init(_) => 4,
            SegError::Contract(_) | SegError::Solver(_) => 5,
        }
    }
}

pub type Result<T, E = SegError> = std::result::Result<T, E>;
