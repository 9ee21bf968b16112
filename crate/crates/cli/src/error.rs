use std::io;
use std::path::{Path, PathBuf};

/// Failures of a command, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    /// A readable file with unusable contents.
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
    #[error("checkpoint does not match the configured network at parameter `{name}`: {detail}")]
    CheckpointMismatch { name: String, detail: String },
    #[error("scan cross-check failed for {kernel} at L={len}, S={state}: max abs diff {diff:e}")]
    CrossCheck {
        kernel: String,
        len: usize,
        state: usize,
        diff: f64,
    },
    #[error(transparent)]
    Core(#[from] flowmamba_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io { .. } | CliError::Format { .. } => 2,
            CliError::Core(flowmamba_core::Error::Training { .. }) => 3,
            CliError::CheckpointMismatch { .. } => 4,
            CliError::CrossCheck { .. } => 5,
            CliError::Usage(_) | CliError::Core(_) => 1,
        }
    }

    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn format(path: &Path, message: impl Into<String>) -> Self {
        CliError::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
