use std::fmt;

use bsa_core::BsaError;

/// Exit status for configurations rejected before any work starts.
pub const EXIT_INVALID_CONFIG: i32 = 3;
/// Exit status for a failed check suite or a runtime error.
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug)]
pub struct CliError {
    pub kind: String,
    pub msg: String,
    pub status: i32,
}

impl CliError {
    pub fn new(kind: impl Into<String>, msg: impl Into<String>, status: i32) -> Self {
        Self {
            kind: kind.into(),
            msg: msg.into(),
            status,
        }
    }

    pub fn invalid_config(msg: impl Into<String>) -> Self {
        Self::new("invalid-config", msg, EXIT_INVALID_CONFIG)
    }

    /// The single machine-parseable line printed on stderr.
    pub fn line(&self) -> String {
        let msg = self.msg.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
        format!("error kind={} msg=\"{msg}\"", self.kind)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.line())
    }
}

impl std::error::Error for CliError {}

impl From<BsaError> for CliError {
    fn from(e: BsaError) -> Self {
        let status = match e {
            BsaError::InvalidConfig(_) | BsaError::InvalidArgument(_) => EXIT_INVALID_CONFIG,
            _ => EXIT_FAILURE,
        };
        let msg = match &e {
            BsaError::InvalidConfig(m) | BsaError::InvalidArgument(m) => m.clone(),
            other => other.to_string(),
        };
        Self::new(e.kind(), msg, status)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new("io", e.to_string(), EXIT_FAILURE)
    }
}

pub type CliResult<T> = Result<T, CliError>;
