use std::fmt;

use fuselab_core::Error as CoreError;

/// Process exit codes.
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_IO: i32 = 1;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn input(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_IO,
            message: message.into(),
        }
    }

    /// Classifies a library error raised while reading or checking inputs.
    pub fn from_core(context: &str, err: CoreError) -> Self {
        let code = match &err {
            CoreError::InvalidConfig(_)
            | CoreError::Capacity { .. }
            | CoreError::LesionOutOfBounds { .. } => EXIT_USAGE,
            CoreError::DegeneratePosterior { .. } | CoreError::EmAborted { .. } => EXIT_NUMERIC,
            _ => EXIT_INPUT,
        };
        let message = match err {
            CoreError::Capacity { experts, guard } => format!(
                "{context}: soft-exact enumerates 2^{experts} vote combinations per voxel, above the \
                 guard of {guard} experts; use --variant soft-mc instead"
            ),
            other => format!("{context}: {other}"),
        };
        CliError { code, message }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub type CliResult<T> = Result<T, CliError>;
