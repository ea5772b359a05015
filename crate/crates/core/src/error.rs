use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = SaeError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SaeError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
    #[error("render error at stroke {stroke}: {message}")]
    Render { stroke: usize, message: String },
    #[error("surgery error on parameter `{param}`: {message}")]
    Surgery { param: String, message: String },
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SaeError {
    /// Process exit status: 2 configuration or input format, 3 I/O,
    /// 4 numeric failure, 5 surgery, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            SaeError::Config(_) | SaeError::Usage(_) | SaeError::Parse { .. } => 2,
            SaeError::Io { .. } => 3,
            SaeError::Numeric(_) => 4,
            SaeError::Surgery { .. } => 5,
            SaeError::Dimension(_) | SaeError::Range(_) | SaeError::Data(_) | SaeError::Render { .. } => 1,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        SaeError::Dimension(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SaeError::Io {
            path: path.into(),
            source,
        }
    }
}
