// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command failures and their exit codes.

use std::fmt;

use neuronscope::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or option values.
    Usage(String),
    /// Unreadable or invalid input files.
    Data(String),
    /// Numeric, resource or transport failure while running.
    Runtime(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

fn classify(e: &Error) -> u8 {
    match e {
        Error::Argument(_) => EXIT_USAGE,
        Error::NonFinite { .. } | Error::Resource(_) | Error::Transport(_) => EXIT_RUNTIME,
        Error::Sample { source, .. } => classify(source),
        Error::Config(_)
        | Error::Length { .. }
        | Error::InsufficientContext { .. }
        | Error::MalformedHeader(_)
        | Error::ShapeMismatch { .. }
        | Error::Truncated { .. }
        | Error::Data { .. }
        | Error::Io(_)
        | Error::Json(_) => EXIT_DATA,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match classify(&e) {
            EXIT_USAGE => CliError::Usage(msg),
            EXIT_RUNTIME => CliError::Runtime(msg),
            _ => CliError::Data(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
