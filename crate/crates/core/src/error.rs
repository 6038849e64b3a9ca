use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, MvsError>;

/// Errors surfaced by scene I/O, validation and the solver.
#[derive(Debug, thiserror::Error)]
pub enum MvsError {
    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("validation error for view {view}: {message}")]
    Validation { view: u32, message: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl MvsError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MvsError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        MvsError::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
