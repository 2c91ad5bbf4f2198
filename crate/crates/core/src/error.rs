use std::fmt;

/// Errors raised by the library.
///
/// `Contract` covers violated preconditions (shape mismatches, out-of-range
/// indices, invalid parameters). `Config` is reserved for experiment
/// configuration problems so the CLI can map it to its own exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl fmt::Display) -> Self {
        Error::Contract(msg.to_string())
    }
}

/// Returns early with a [`Error::Contract`] when the condition does not hold.
macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !($cond) {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
