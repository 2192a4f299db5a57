use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error)]
pub enum LabError {
    /// A precondition of an operation was violated by its arguments.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A state became non-finite while stepping.
    #[error("integration failure at step {step}: {detail}")]
    Integration { step: usize, detail: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl LabError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        LabError::Contract(msg.into())
    }

    pub(crate) fn unsupported(msg: impl Into<String>) -> Self {
        LabError::Unsupported(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        LabError::Validation(msg.into())
    }

    /// Short machine-readable category, printed by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            LabError::Contract(_) => "contract",
            LabError::Unsupported(_) => "unsupported",
            LabError::Integration { .. } => "integration",
            LabError::Parse(_) => "parse",
            LabError::Validation(_) => "validation",
            LabError::Io(_) => "io",
        }
    }

    /// Process exit status used by the `mvlab` binary.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Parse(_) => 2,
            LabError::Validation(_) | LabError::Contract(_) => 3,
            LabError::Integration { .. } => 4,
            LabError::Unsupported(_) => 5,
            LabError::Io(_) => 1,
        }
    }
}
