use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),

    #[error("checkpoint is missing parameter `{0}`")]
    MissingParameter(String),

    #[error("degenerate box {0:?}")]
    DegenerateBox([f64; 4]),

    #[error("box {0:?} lies entirely outside the feature map")]
    BoxOutsideFeatureMap([f64; 4]),

    #[error("unknown pyramid level {0}")]
    UnknownLevel(usize),

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error("task `{requested}` does not match checkpoint contents: {reason}")]
    TaskMismatch { requested: String, reason: String },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by bad user input rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_) | Error::Config(_) | Error::TaskMismatch { .. } | Error::Format { .. } | Error::MissingParameter(_)
        )
    }
}
