use thiserror::Error;

/// Crate-wide error type. Runner exit codes are derived from the variant.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("invalid parameter `{field}`: {message}")]
    Parameter { field: String, message: String },

    #[error("usage error: {0}")]
    Usage(String),

    #[error("capacity error: sequence length {n} exceeds context cap {cap}")]
    Capacity { n: usize, cap: usize },

    #[error("training diverged at step {step}: loss is not finite")]
    TrainingDiverged { step: usize },

    #[error("insufficient samples: need at least {need}, got {got}")]
    InsufficientSamples { need: usize, got: usize },

    #[error("experiment plan error: {0}")]
    Plan(String),

    #[error("experiment failed: {0}")]
    Experiment(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl LabError {
    pub fn parameter(field: &str, message: impl Into<String>) -> Self {
        LabError::Parameter {
            field: field.to_string(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 experiment, 4 IO.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) | LabError::Parameter { .. } | LabError::Usage(_) => 2,
            LabError::Io { .. } => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
