use thiserror::Error;

use crate::diff::DiffError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("rollout diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    TrainingDiverged { epoch: usize, batch: usize, detail: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {detail}")]
    Format { path: String, detail: String },
    #[error("missing input: {0}")]
    Missing(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    /// Process exit code grouping errors by category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Invalid(_) | Error::Dimension { .. } => 2,
            Error::Io { .. } | Error::Format { .. } | Error::Missing(_) => 3,
            Error::Diverged { .. } | Error::TrainingDiverged { .. } => 4,
            Error::Diff(_) => 5,
        }
    }
}

pub(crate) fn check_dim(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { what, expected, got });
    }
    Ok(())
}
