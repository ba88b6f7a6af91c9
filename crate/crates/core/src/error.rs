use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// Each variant maps onto a process exit code through [`MireError::exit_code`],
/// which the CLI uses verbatim.
#[derive(Debug, Error)]
pub enum MireError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error at byte offset {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MireError>;

impl MireError {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        MireError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        MireError::Numeric {
            op,
            detail: detail.into(),
        }
    }

    pub fn contract(detail: impl Into<String>) -> Self {
        MireError::Contract(detail.into())
    }

    pub fn config(detail: impl Into<String>) -> Self {
        MireError::Config(detail.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            MireError::Config(_) => 2,
            MireError::Contract(_) | MireError::Shape { .. } | MireError::Consistency(_) => 3,
            MireError::Numeric { .. } => 4,
            MireError::Format { .. } | MireError::Io(_) | MireError::Json(_) => 1,
        }
    }
}
