use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SundaeError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("instance too large: {0}")]
    Size(String),
    #[error("unsupported in this model mode: {0}")]
    UnsupportedMode(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = SundaeError> = std::result::Result<T, E>;

macro_rules! bail_arg {
    ($($t:tt)*) => {
        return Err($crate::error::SundaeError::Argument(format!($($t)*)))
    };
}
pub(crate) use bail_arg;
