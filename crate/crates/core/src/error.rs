use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the simulator, its file formats and the autodiff tape.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("numerical instability at step {step} during {stage}")]
    Unstable { step: usize, stage: &'static str },

    #[error("unsupported operation `{0}`")]
    UnsupportedOp(String),

    #[error("loss must be a scalar node, got shape {0}")]
    NonScalarLoss(String),

    #[error("{}: malformed header: {msg}", path.display())]
    Header { path: PathBuf, msg: String },

    #[error("{}: unsupported format version {found}", path.display())]
    Version { path: PathBuf, found: u64 },

    #[error("{}: payload length {found} bytes, expected {expected}", path.display())]
    PayloadLength {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Stable snake_case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidGrid(_) => "invalid_grid",
            Error::Domain(_) => "domain",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::InvalidParams(_) => "invalid_params",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Unstable { .. } => "unstable",
            Error::UnsupportedOp(_) => "unsupported_op",
            Error::NonScalarLoss(_) => "non_scalar_loss",
            Error::Header { .. } => "header",
            Error::Version { .. } => "version",
            Error::PayloadLength { .. } => "payload_length",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
