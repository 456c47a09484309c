use resyn_core::Error as CoreError;

/// Failure classes with their process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("capability error: {0}")]
    Capability(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Capability(_) => 4,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::InvalidArgument(_) => CliError::Config(e.to_string()),
            CoreError::Capability(_) => CliError::Capability(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

/// Exit code for an error chain: the first classified cause wins, anything
/// unclassified counts as a data error.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(c) = cause.downcast_ref::<CliError>() {
            return c.exit_code();
        }
        if let Some(c) = cause.downcast_ref::<CoreError>() {
            return match c {
                CoreError::InvalidArgument(_) => 2,
                CoreError::Capability(_) => 4,
                _ => 3,
            };
        }
    }
    3
}
