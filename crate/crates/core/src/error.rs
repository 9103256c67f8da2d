use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, IonError>;

/// Errors surfaced by the tensor engine, models, data pipeline and training
/// schemes.
#[derive(Debug, Clone, PartialEq)]
pub enum IonError {
    /// An operator received tensors whose shapes cannot be combined.
    ShapeMismatch { op: &'static str, detail: String },
    /// An argument violated an operator precondition.
    InvalidArg { op: &'static str, detail: String },
    /// Batch-norm evaluation requested before any training step populated
    /// the running statistics.
    UninitializedStats { layer: String },
    /// A gradient contained NaN or infinity; the optimiser step was aborted.
    NonFiniteGrad { param: String },
    /// Configuration rejected (bad field, unknown key, missing value).
    Config(String),
    /// Malformed external data (checkpoint, dataset file, image).
    Format(String),
    /// Underlying I/O failure.
    Io(String),
}

impl fmt::Display for IonError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IonError::ShapeMismatch { op, detail } => {
                write!(f, "{op}: shape mismatch: {detail}")
            }
            IonError::InvalidArg { op, detail } => write!(f, "{op}: invalid argument: {detail}"),
            IonError::UninitializedStats { layer } => {
                write!(f, "{layer}: uninitialised statistics: batch norm evaluated before any training step")
            }
            IonError::NonFiniteGrad { param } => {
                write!(f, "non-finite gradient for parameter `{param}`; step aborted")
            }
            IonError::Config(msg) => write!(f, "config error: {msg}"),
            IonError::Format(msg) => write!(f, "format error: {msg}"),
            IonError::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for IonError {}

impl From<std::io::Error> for IonError {
    fn from(e: std::io::Error) -> Self {
        IonError::Io(e.to_string())
    }
}
