use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, DdsmError>;

/// Errors emitted by kernels, text formats and the command layer.
#[derive(Debug)]
pub enum DdsmError {
    /// An operation received tensors whose shapes do not fit its contract.
    Shape(String),
    /// Invalid configuration value or key.
    Config(String),
    /// A text format (tensor, PGM, checkpoint manifest) failed to parse.
    Parse(String),
    /// A numeric input was NaN or infinite where finiteness is required.
    NonFinite(&'static str),
    /// Training diverged; the payload is the step at which the loss became NaN.
    Diverged { step: usize },
    Io(std::io::Error),
}

impl fmt::Display for DdsmError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Shape(msg) => write!(f, "shape error: {msg}"),
            Self::Config(msg) => write!(f, "config error: {msg}"),
            Self::Parse(msg) => write!(f, "parse error: {msg}"),
            Self::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Self::Diverged { step } => write!(f, "training diverged: loss became NaN at step {step}"),
            Self::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for DdsmError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Self::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for DdsmError {
    fn from(err: std::io::Error) -> Self {
        Self::Io(err)
    }
}
