use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Incompatible shapes, channel counts, or invalid settings.
    #[error("configuration error: {0}")]
    Config(String),
    /// A value outside the domain of an operation (sqrt/log of a negative, NaN loss).
    #[error("numeric domain error: {0}")]
    NumericDomain(String),
    /// Moments requested over zero samples.
    #[error("empty batch")]
    EmptyBatch,
    /// A dataset with no examples.
    #[error("empty dataset")]
    EmptyDataset,
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! config_err {
    ($($arg:tt)*) => {
        $crate::Error::Config(alloc::format!($($arg)*))
    };
}
pub(crate) use config_err;
