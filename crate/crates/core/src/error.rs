use alloc::string::String;

/// Errors raised anywhere in the core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("decode error at byte {offset}: {reason}")]
    Decode { offset: usize, reason: String },
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("transport error: {0}")]
    Transport(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! bail {
    ($variant:ident, $($arg:tt)*) => {
        return Err($crate::error::Error::$variant(alloc::format!($($arg)*)))
    };
}
pub(crate) use bail;
