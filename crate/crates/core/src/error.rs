//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its contents cannot be interpreted (CSV structure,
    /// JSON syntax, bad numeric literals, header mismatches, ...).
    #[error("{path}: {message}")]
    Parse { path: String, message: String },

    #[error("invalid schema: {0}")]
    Schema(String),

    /// Per-row dataset violations; `row` is the 0-based data row index.
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("degenerate calibration set: {0}")]
    DegenerateCalibration(String),

    #[error("probability source is tagged '{actual}' but mode '{requested}' was requested")]
    ModeMismatch { requested: String, actual: String },

    #[error("no probability row for sample id {0}")]
    MissingSampleId(u64),

    #[error("model/schema mismatch: {0}")]
    SchemaMismatch(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn parse(path: impl AsRef<std::path::Path>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.as_ref().display().to_string(),
            message: message.into(),
        }
    }
}
