use std::fmt;

/// Failure classes surfaced by the library and mapped onto CLI exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor extents that do not agree for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// Malformed or out-of-range user input (files, labels, config keys).
    #[error("input error: {0}")]
    Input(String),
    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),
    /// A NaN or infinity showed up where finite values are required.
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Process exit codes for the command-line front end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Success = 0,
    InputError = 1,
    ContractViolation = 2,
    NumericFailure = 3,
}

impl Error {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            Error::Input(_) | Error::Io(_) => ExitCode::InputError,
            Error::Dimension(_) | Error::Contract(_) => ExitCode::ContractViolation,
            Error::Numeric(_) => ExitCode::NumericFailure,
        }
    }

    pub(crate) fn dim(what: impl fmt::Display) -> Self {
        Error::Dimension(what.to_string())
    }

    pub(crate) fn contract(what: impl fmt::Display) -> Self {
        Error::Contract(what.to_string())
    }

    pub(crate) fn input(what: impl fmt::Display) -> Self {
        Error::Input(what.to_string())
    }
}
