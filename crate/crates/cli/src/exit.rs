//! Process exit codes and error classification.

use std::fmt;

use fedshard::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Code {
    Other = 1,
    Config = 2,
    Data = 3,
    Cache = 4,
    Request = 5,
}

#[derive(Debug)]
pub struct CliError {
    pub code: Code,
    pub message: String,
}

impl CliError {
    pub fn new(code: Code, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    /// Classifies a library error; `fallback` covers I/O and other generic failures.
    pub fn from_lib(err: Error, fallback: Code) -> Self {
        let code = match &err {
            Error::Config(_) => Code::Config,
            Error::Request(_) => Code::Request,
            Error::Parse { .. } | Error::Schema(_) => Code::Data,
            e if e.is_cache_error() => Code::Cache,
            _ => fallback,
        };
        CliError::new(code, err.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Extension for tagging library results with a fallback code.
pub trait Tag<T> {
    fn tag(self, fallback: Code) -> Result<T, CliError>;
}

impl<T> Tag<T> for Result<T, Error> {
    fn tag(self, fallback: Code) -> Result<T, CliError> {
        self.map_err(|e| CliError::from_lib(e, fallback))
    }
}
