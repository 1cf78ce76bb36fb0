use thiserror::Error;

/// Unified error type for the crate.
#[derive(Debug, Error)]
pub enum McvdError {
    #[error("config error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{name} = {value} out of range ({expected})")]
    Range {
        name: &'static str,
        value: f64,
        expected: &'static str,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("truncated or oversized payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("dimension overflow: {0}")]
    DimOverflow(String),

    #[error("unsupported format version {0}")]
    Version(u8),

    #[error("task {task} not supported by this checkpoint ({reason})")]
    TaskUnsupported { task: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, McvdError>;

impl McvdError {
    pub fn config(msg: impl Into<String>) -> Self {
        McvdError::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        McvdError::Shape(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        McvdError::Numeric(msg.into())
    }
}
