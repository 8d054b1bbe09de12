use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = OeemError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum OeemError {
    #[error("bias field magnitude {magnitude:.3e} T is below the zero-field threshold {threshold:.3e} T")]
    ZeroField { magnitude: f64, threshold: f64 },

    #[error("dipolar field requested at zero distance from the moment")]
    ZeroDistance,

    #[error("fit failed: {0}")]
    FitFailure(String),

    #[error("insufficient data: need at least {needed} points, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl OeemError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        OeemError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable identifier, used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            OeemError::ZeroField { .. } => "ZeroField",
            OeemError::ZeroDistance => "ZeroDistance",
            OeemError::FitFailure(_) => "FitFailure",
            OeemError::InsufficientData { .. } => "InsufficientData",
            OeemError::InvalidInput(_) => "InvalidInput",
            OeemError::Config(_) => "ConfigError",
            OeemError::Io { .. } => "IoError",
            OeemError::Csv(_) => "IoError",
        }
    }
}
