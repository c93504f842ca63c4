use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("backward root must be a 1x1 scalar, got {0:?}")]
    NonScalarRoot((usize, usize)),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("function is not deterministic: two forward passes gave {first} and {second}")]
    Determinism { first: f64, second: f64 },

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty split")]
    EmptySplit,

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("underdetermined fit: {0}")]
    Underdetermined(String),

    #[error("degenerate fit: {0}")]
    Degenerate(String),

    #[error("degenerate slope: gamma1 + gamma2 = 0")]
    DegenerateSlope,

    #[error("closed-form optimum {closed} disagrees with numeric optimum {numeric}")]
    CrossCheck { closed: f64, numeric: f64 },

    #[error("training diverged at step {step} (lr {lr}): {detail}")]
    Divergence { step: usize, lr: f64, detail: String },

    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: u64, reason: String },

    #[error("malformed blob {path}: {reason}")]
    Blob { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::Determinism { .. }
                | Error::Degenerate(_)
                | Error::DegenerateSlope
                | Error::CrossCheck { .. }
                | Error::Divergence { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
