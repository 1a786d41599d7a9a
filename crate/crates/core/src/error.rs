use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("task {task_id}: {msg}")]
    Prompt { task_id: usize, msg: String },

    #[error("non-finite loss {value} at {context}")]
    NonFinite { value: f64, context: String },

    #[error("empty prompt pool")]
    EmptyPool,

    #[error("{0}")]
    Data(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint array `{array}`: {msg}")]
    CheckpointArray { array: String, msg: String },

    #[error("report: {0}")]
    Report(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn domain(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Domain {
            op,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable short code used as the CLI error prefix.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "E_SHAPE",
            Error::Domain { .. } => "E_DOMAIN",
            Error::NotScalar(_) => "E_NOT_SCALAR",
            Error::Config(_) => "E_CONFIG",
            Error::Prompt { .. } => "E_PROMPT",
            Error::NonFinite { .. } => "E_NONFINITE",
            Error::EmptyPool => "E_EMPTY_POOL",
            Error::Data(_) => "E_DATA",
            Error::Checkpoint(_) | Error::CheckpointArray { .. } => "E_CHECKPOINT",
            Error::Report(_) => "E_REPORT",
            Error::Io { .. } => "E_IO",
        }
    }

    /// Whether the failure is a validation problem (bad input) rather than a
    /// runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::EmptyPool | Error::Prompt { .. } | Error::Report(_)
        )
    }
}
