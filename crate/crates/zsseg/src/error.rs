//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Matrix or layer shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A value is outside its documented range, or an index is invalid.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A requested class or parameter name does not exist.
    #[error("lookup failed: {0}")]
    Lookup(String),

    /// Malformed text input (checkpoint, scene, or word-vector file).
    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },

    /// Bad experiment configuration.
    #[error("config error{}: {msg}", fmt_line(.line))]
    Config { line: Option<usize>, msg: String },

    /// A pipeline stage was invoked before its prerequisite stage.
    #[error("stage order violated: {0}")]
    StageOrder(String),

    /// NaN or infinity encountered where a finite value is required.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Operation requires state that has not been established.
    #[error("state error: {0}")]
    State(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

fn fmt_line(line: &Option<usize>) -> String {
    match line {
        Some(l) => format!(" at line {l}"),
        None => String::new(),
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config {
            line: None,
            msg: msg.into(),
        }
    }

    pub fn config_at(line: usize, msg: impl Into<String>) -> Self {
        Error::Config {
            line: Some(line),
            msg: msg.into(),
        }
    }

    pub fn format_at(line: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            line,
            msg: msg.into(),
        }
    }

    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Argument(_) => 2,
            Error::StageOrder(_) => 3,
            Error::Numeric(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
