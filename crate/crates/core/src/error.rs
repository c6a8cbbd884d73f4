//! Crate-wide error type.
//!
//! One enum covers every failure mode in the library. Variants carry the
//! context a caller needs to act on the error; none of them wrap each other.

use std::fmt;

/// Result alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Tensor or layer shapes are incompatible.
    ShapeMismatch {
        expected: Vec<usize>,
        got: Vec<usize>,
        context: &'static str,
    },
    /// A computation produced NaN or infinity where finite values are required.
    NonFinite { context: &'static str },
    /// backward called on a tape with no recorded forward pass.
    EmptyTape,
    /// Class label outside [0, class_count).
    LabelOutOfRange { label: usize, class_count: usize },
    /// Training loss became NaN/Inf (learning rate too high for the data).
    DivergedTraining { epoch: usize },
    /// Underlying I/O failure.
    Io { path: String, message: String },
    /// A file or byte stream does not match its declared format.
    /// `offset` is the byte position of the violation when known.
    Format {
        message: String,
        offset: Option<u64>,
    },
    /// ApcMemory is at capacity; no further records can be committed.
    MemoryFull { capacity: usize },
    /// Capture requested while the counter FSM is not in the required state.
    FsmViolation { state: &'static str },
    /// TOPs requested for a layer with zero elapsed time.
    ZeroElapsed,
    /// All candidate logit-difference gradients are numerically zero.
    DegenerateGradient,
    /// A trace record failed its checksum.
    IntegrityError { input_id: String },
    /// A feature layout references a (layer, metric) the record does not carry.
    MissingMetric {
        layer_index: usize,
        metric: &'static str,
    },
    /// Records or datasets disagree on feature layout.
    LayoutMismatch { message: String },
    /// Detector training requires both classes present.
    SingleClassDataset,
    /// Fewer samples than an operation's stated minimum.
    InsufficientData { required: usize, got: usize },
    /// A configuration value violates its invariant.
    InvalidConfig { message: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch {
                expected,
                got,
                context,
            } => write!(
                f,
                "shape mismatch in {context}: expected {expected:?}, got {got:?}"
            ),
            Error::NonFinite { context } => {
                write!(f, "non-finite value produced in {context}")
            }
            Error::EmptyTape => write!(f, "backward called on an empty gradient tape"),
            Error::LabelOutOfRange { label, class_count } => {
                write!(f, "label {label} out of range for {class_count} classes")
            }
            Error::DivergedTraining { epoch } => {
                write!(f, "training diverged (non-finite loss) at epoch {epoch}")
            }
            Error::Io { path, message } => write!(f, "io error on {path}: {message}"),
            Error::Format { message, offset } => match offset {
                Some(off) => write!(f, "format error at byte {off}: {message}"),
                None => write!(f, "format error: {message}"),
            },
            Error::MemoryFull { capacity } => {
                write!(f, "trace memory full (capacity {capacity})")
            }
            Error::FsmViolation { state } => {
                write!(f, "capture rejected: counter FSM is in state {state}")
            }
            Error::ZeroElapsed => write!(f, "cannot compute TOPs for zero elapsed time"),
            Error::DegenerateGradient => {
                write!(f, "all candidate gradients are numerically zero")
            }
            Error::IntegrityError { input_id } => {
                write!(f, "trace record {input_id:?} failed checksum verification")
            }
            Error::MissingMetric {
                layer_index,
                metric,
            } => write!(
                f,
                "record has no {metric} metric for layer {layer_index}"
            ),
            Error::LayoutMismatch { message } => write!(f, "feature layout mismatch: {message}"),
            Error::SingleClassDataset => {
                write!(f, "detector training needs both clean and adversarial samples")
            }
            Error::InsufficientData { required, got } => {
                write!(f, "need at least {required} samples, got {got}")
            }
            Error::InvalidConfig { message } => write!(f, "invalid configuration: {message}"),
        }
    }
}

impl std::error::Error for Error {}

impl Error {
    /// Wrap an I/O error with the path it occurred on.
    pub fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            message: err.to_string(),
        }
    }

    pub fn format(message: impl Into<String>) -> Self {
        Error::Format {
            message: message.into(),
            offset: None,
        }
    }

    pub fn format_at(message: impl Into<String>, offset: u64) -> Self {
        Error::Format {
            message: message.into(),
            offset: Some(offset),
        }
    }

    pub fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            message: message.into(),
        }
    }
}
