//! Error type shared by every module, with a stable mapping to CLI exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad key, bad value, inconsistent settings.
    #[error("configuration error: {0}")]
    Config(String),

    /// Missing, malformed, or mismatched input data.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values, failed numerical contracts, out-of-range timesteps.
    #[error("numerical error: {0}")]
    Numeric(String),

    /// Timestep outside 1..=T.
    #[error("timestep {t} out of range 1..={max}")]
    Timestep { t: usize, max: usize },

    /// An API precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// CLI exit code: 2 configuration, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Numeric(_) | Error::Timestep { .. } | Error::Contract(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
