use thiserror::Error;

#[derive(Debug, Error)]
pub enum TdmError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("spatial misalignment in {op}: {a:?} vs {b:?}")]
    Alignment {
        op: &'static str,
        a: (usize, usize),
        b: (usize, usize),
    },

    #[error("non-positive output size in {op}: {detail}")]
    OutputSize { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing gradient for parameter {0}")]
    MissingGrad(String),

    #[error("unknown parameter {0}")]
    UnknownParam(String),

    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl TdmError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TdmError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        TdmError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Stable machine-readable kind tag, used by the CLI error record.
    pub fn kind(&self) -> &'static str {
        match self {
            TdmError::Shape { .. } => "shape",
            TdmError::Alignment { .. } => "alignment",
            TdmError::OutputSize { .. } => "output_size",
            TdmError::NonFinite { .. } => "non_finite",
            TdmError::Invalid(_) => "invalid_argument",
            TdmError::Config(_) => "config",
            TdmError::MissingGrad(_) => "missing_grad",
            TdmError::UnknownParam(_) => "unknown_param",
            TdmError::Parse { .. } => "parse",
            TdmError::Io { .. } => "io",
            TdmError::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, TdmError>;
