//! Error type shared across the crate.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Incompatible tensor or layer shapes.
    #[error("dimension mismatch in {context}: {left:?} vs {right:?}")]
    Dimension {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// Invalid argument to an operation (empty input, bad range, ...).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Invalid configuration (hyper-parameters, experiment spec, ...).
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// Internal graph contract violated (non-scalar loss, bad node id, ...).
    #[error("graph contract violated: {0}")]
    Contract(String),

    /// Training failed (divergence, non-finite gradients, ...).
    #[error("training error: {0}")]
    Training(String),

    /// Statistics requested on too few samples.
    #[error("statistics error: {0}")]
    Statistics(String),

    /// Operation requires a fitted model.
    #[error("model state error: {0}")]
    State(String),

    /// Model file carries an unsupported format version.
    #[error("unsupported model format version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dimension(context: impl Into<String>, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            context: context.into(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 usage/config, 2 data, 3 training.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) => 1,
            Error::Data(_) | Error::Io { .. } | Error::Json(_) | Error::UnsupportedVersion { .. } => 2,
            Error::Training(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
