use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum ArsegError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("decoding state error: {0}")]
    State(String),

    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, ArsegError>;

impl ArsegError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        ArsegError::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        ArsegError::Config(msg.into())
    }

    pub fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        ArsegError::Shape {
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        ArsegError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        ArsegError::Io {
            path: path.into(),
            source,
        }
    }
}
