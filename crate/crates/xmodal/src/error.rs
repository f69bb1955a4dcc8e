use thiserror::Error;

#[derive(Debug, Error)]
pub enum XmodalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("pool contract violation: {0}")]
    Pool(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, XmodalError>;

impl XmodalError {
    pub fn shape(msg: impl Into<String>) -> Self {
        XmodalError::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        XmodalError::Config(msg.into())
    }
}
