use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FairsegError {
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("value {value} outside attribute `{attribute}` range [{low}, {high}]")]
    OutOfRange {
        value: f64,
        attribute: String,
        low: f64,
        high: f64,
    },
    #[error("dataset load failed: {0}")]
    Load(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("missing checkpoint {path}: {hint}")]
    MissingCheckpoint { path: PathBuf, hint: String },
    #[error("run directory {0} already exists (pass --force to overwrite)")]
    RunExists(PathBuf),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Nn(#[from] fairseg_nn::NnError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl FairsegError {
    /// Stable category string for machine-readable CLI errors.
    pub fn category(&self) -> &'static str {
        match self {
            Self::Config { .. } => "config",
            Self::OutOfRange { .. } | Self::Load(_) => "data",
            Self::Shape(_) => "shape",
            Self::Metric(_) => "metric",
            Self::Divergence { .. } => "divergence",
            Self::MissingCheckpoint { .. } => "missing-checkpoint",
            Self::RunExists(_) => "run-exists",
            Self::Invalid(_) => "invalid",
            Self::Nn(_) => "model",
            Self::Io { .. } | Self::Json(_) | Self::Csv(_) => "io",
        }
    }

    pub(crate) fn config(field: &str, reason: impl Into<String>) -> Self {
        Self::Config {
            field: field.to_string(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = FairsegError> = std::result::Result<T, E>;

/// Attach a path to an I/O error.
pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| FairsegError::Io {
            path: path.into(),
            source,
        })
    }
}
