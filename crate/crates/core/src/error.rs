use std::io;

/// Errors produced by the causal-tune pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

/// Failure classes mapped onto process exit codes by the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureClass {
    Config,
    Numeric,
    Io,
}

impl FailureClass {
    pub fn exit_code(self) -> i32 {
        match self {
            FailureClass::Config => 2,
            FailureClass::Numeric => 3,
            FailureClass::Io => 4,
        }
    }
}

impl Error {
    pub fn class(&self) -> FailureClass {
        match self {
            Error::Numeric(_) => FailureClass::Numeric,
            Error::Io(_) | Error::Format(_) => FailureClass::Io,
            _ => FailureClass::Config,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
