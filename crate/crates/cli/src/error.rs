use std::fmt;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_DATA: i32 = 5;
pub const EXIT_CHECKPOINT: i32 = 6;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn io(path: &std::path::Path, e: impl fmt::Display) -> Self {
        Self {
            code: EXIT_IO,
            message: format!("{}: {e}", path.display()),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<lambda_maml::Error> for CliError {
    fn from(e: lambda_maml::Error) -> Self {
        use lambda_maml::Error as E;
        let code = match &e {
            E::Config(_) | E::Pattern(_) | E::InvalidLabel { .. } => EXIT_CONFIG,
            E::Io { .. } => EXIT_IO,
            E::Dataset(_) | E::Parse { .. } => EXIT_DATA,
            E::Checkpoint(_) => EXIT_CHECKPOINT,
            _ => EXIT_FAILURE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
