use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("format error at {location}: {message}")]
    Format { location: String, message: String },
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn format(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format { location: location.into(), message: message.into() }
    }

    /// An I/O error annotated with the path involved.
    pub fn io(path: impl std::fmt::Display, e: std::io::Error) -> Self {
        Error::Io(std::io::Error::new(e.kind(), format!("{path}: {e}")))
    }

    /// Stable machine-readable tag used by the CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Input(_) => "input",
            Error::Degenerate(_) => "degenerate",
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::Format { .. } => "format",
            Error::NonFinite { .. } => "non_finite",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
pub(crate) use dim_err;
