use std::fmt;

/// Error type shared by every module of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid quaternion: {0}")]
    InvalidQuaternion(String),

    #[error("invalid gaussian {index}: {reason}")]
    InvalidGaussian { index: usize, reason: String },

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("degenerate baseline between context cameras (|t| = {0})")]
    DegenerateBaseline(f64),

    #[error("configuration error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("not initialized: {0}")]
    NotInitialized(String),

    #[error("acceptance failure: {0}")]
    Acceptance(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error category, mirrored by process exit codes and the C ABI status codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorCategory {
    InvalidInput,
    Config,
    Format,
    Numeric,
    Acceptance,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::InvalidInput => 1,
            ErrorCategory::Config => 2,
            ErrorCategory::Format => 3,
            ErrorCategory::Numeric => 4,
            ErrorCategory::Acceptance => 5,
        }
    }
}

impl fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ErrorCategory::InvalidInput => "invalid-input",
            ErrorCategory::Config => "config",
            ErrorCategory::Format => "data-format",
            ErrorCategory::Numeric => "numeric",
            ErrorCategory::Acceptance => "acceptance",
        };
        f.write_str(s)
    }
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Config,
            Error::Format { .. } | Error::Io(_) => ErrorCategory::Format,
            Error::Numeric(_) => ErrorCategory::Numeric,
            Error::Acceptance(_) => ErrorCategory::Acceptance,
            _ => ErrorCategory::InvalidInput,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.category().exit_code()
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn config(message: impl Into<String>) -> Self {
        Error::Config(vec![message.into()])
    }
}
