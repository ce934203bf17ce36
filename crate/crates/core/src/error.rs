use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("asset error: {0}")]
    Asset(String),

    #[error("projection error: point {index} has z = {z} (must be > 0)")]
    Projection { index: usize, z: f64 },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("load error for sample `{id}`: {detail}")]
    Load { id: String, detail: String },

    #[error("validation error for sample `{id}`: field `{field}` {detail}")]
    Validation {
        id: String,
        field: &'static str,
        detail: String,
    },

    #[error("ingestion error: {0}")]
    Ingest(String),

    #[error("export error: {0}")]
    Export(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("training diverged at epoch {epoch}: non-finite value in `{path}`")]
    NonFinite { epoch: usize, path: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
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

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Validation { .. } | Error::Asset(_)
        )
    }
}
