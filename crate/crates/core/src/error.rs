use thiserror::Error;

/// Failure classes shared by every module. The CLI maps them to exit codes 2, 3 and 4
/// (I/O failures share code 3 with data errors).
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Invalid configuration: bad discount, unknown covariate, K > T, mismatched dimensions.
    #[error("configuration error: {0}")]
    Config(String),
    /// The data cannot support the request: non-finite values, missing arms, schema violations.
    #[error("data error: {0}")]
    Data(String),
    /// A numerical failure that survived jitter: singular matrices, degenerate variances.
    #[error("numerical error: {0}")]
    Numerical(String),
    /// Reading or writing a file failed.
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn io(msg: impl Into<String>) -> Self {
        Error::Io(msg.into())
    }

    /// Short machine-readable class name.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Numerical(_) => "numerical",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
