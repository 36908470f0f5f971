use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape error: {0}")]
    Shape(String),

    /// Argument outside the operation's domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset missing, malformed or otherwise unusable.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite value produced where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Batch-norm statistics requested before any were estimated.
    #[error("calibration required: {0}")]
    CalibrationRequired(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 config, 3 data, 4 numeric, 1 anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Numeric(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[macro_export]
macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::Error::Shape(format!($($arg)*)) };
}

#[macro_export]
macro_rules! domain_err {
    ($($arg:tt)*) => { $crate::Error::Domain(format!($($arg)*)) };
}
