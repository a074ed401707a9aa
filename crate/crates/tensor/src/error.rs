use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    /// A caller broke an operation's documented precondition (shapes, ranks, indices).
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

macro_rules! contract {
    ($($arg:tt)*) => {
        $crate::error::TensorError::Contract(format!($($arg)*))
    };
}
pub(crate) use contract;
