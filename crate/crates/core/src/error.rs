use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("non-finite value in parameter `{0}`")]
    NonFinite(String),

    #[error("schema error: {0}")]
    Schema(String),

    /// Pooled standard deviation is zero while the sample means differ.
    #[error("degenerate shift: zero pooled standard deviation with mean gap {gap}")]
    DegenerateShift { gap: f64 },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("training diverged in stage {stage} at epoch {epoch}")]
    Divergence { stage: String, epoch: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("{} experiment cell(s) failed: {}", .0.len(), .0.join("; "))]
    Experiment(Vec<String>),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => 2,
            Error::Experiment(_) => 4,
            _ => 3,
        }
    }
}
