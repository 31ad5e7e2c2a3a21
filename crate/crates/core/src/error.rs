use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, ranks or index sets that do not fit together.
    #[error("structural error: {0}")]
    Structural(String),

    /// A collective or rank-coordination rule was violated.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// An operation was applied to a payload of the wrong kind.
    #[error("type error: {0}")]
    Type(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    TomlParse(#[from] toml::de::Error),

    #[error("config serialize error: {0}")]
    TomlWrite(#[from] toml::ser::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! structural {
    ($($arg:tt)*) => { $crate::error::Error::Structural(format!($($arg)*)) };
}
macro_rules! protocol {
    ($($arg:tt)*) => { $crate::error::Error::Protocol(format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
pub(crate) use {config_err, protocol, structural};
