use thiserror::Error;

/// Errors surfaced by the toolkit.
///
/// Variants follow the failure classes of the operations: malformed inputs,
/// inconsistent configuration, corrupt files, diverging training and
/// degenerate inputs for which a metric is undefined.
#[derive(Debug, Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("training error at step {step}: {reason}")]
    Training { step: usize, reason: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! input_err {
    ($($arg:tt)*) => { $crate::error::Error::Input(format!($($arg)*)) };
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}

macro_rules! format_err {
    ($($arg:tt)*) => { $crate::error::Error::Format(format!($($arg)*)) };
}

pub(crate) use {config_err, format_err, input_err};
