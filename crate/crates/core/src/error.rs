use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("non-finite value in {context}: {detail}")]
    NonFinite { context: String, detail: String },

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("diffusion step {k} out of range 0..={max}")]
    StepOutOfRange { k: usize, max: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("demo generation failed for seed {seed}: {reason}")]
    Generation { seed: u64, reason: String },

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64, trace: Vec<f64> },

    #[error("parse error in {path} at record {record}: {reason}")]
    Parse {
        path: PathBuf,
        record: usize,
        reason: String,
    },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing input artifact {path} (run `{producer}` first)")]
    MissingArtifact { path: PathBuf, producer: String },

    #[error("stale artifact {path}: {reason}")]
    StaleArtifact { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn non_finite(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::NonFinite {
            context: context.into(),
            detail: detail.into(),
        }
    }

    /// Short stable identifier used in the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::NonFinite { .. } => "non_finite",
            Error::Schedule(_) => "schedule",
            Error::StepOutOfRange { .. } => "step_range",
            Error::Config(_) => "config",
            Error::Generation { .. } => "generation",
            Error::Diverged { .. } => "diverged",
            Error::Parse { .. } => "parse",
            Error::Checkpoint(_) => "checkpoint",
            Error::MissingArtifact { .. } => "missing_artifact",
            Error::StaleArtifact { .. } => "stale_artifact",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
