use std::fmt;

use kronfit::KronError;

/// Failure classes with stable exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Exit 1.
    Input(String),
    /// Exit 3.
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<KronError> for CliError {
    fn from(e: KronError) -> Self {
        match e {
            KronError::NotPositiveDefinite { .. } | KronError::DegenerateResiduals(_) | KronError::Evaluation(_) => {
                CliError::Numeric(e.to_string())
            }
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Input(e.to_string())
    }
}
