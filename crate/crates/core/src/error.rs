//! Error type shared by all modules in this crate.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensor math, model passes, metrics, and data generation.
#[derive(Clone, Debug, PartialEq)]
pub enum Error {
    /// Two tensors were combined with incompatible shapes.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// `backward` was called on a tensor that is not a scalar.
    NonScalarLoss { shape: Vec<usize> },
    /// An operation received a non-finite input it cannot handle.
    NonFinite { op: &'static str },
    /// Cosine similarity against a zero vector is undefined.
    ZeroVector { op: &'static str },
    /// A task index was outside the range of tasks seen so far.
    TaskOutOfRange { got: usize, count: usize },
    /// An operation that needs at least one element got none.
    EmptyInput(&'static str),
    /// Parameter collections did not align by name.
    ParamMismatch { missing: Vec<String> },
    /// A metric matrix was read before every required cell was filled.
    IncompleteMatrix { missing_k: usize, missing_t: usize },
    /// Forgetting is undefined for a single task.
    ForgettingUndefined,
    /// Silhouette needs at least two groups.
    SingleGroup,
    /// More exemplars were requested than the dataset holds.
    CapacityExceeded { requested: usize, available: usize },
    /// Pretraining stopped below its quality bar.
    PretrainBelowTarget { iou: f64, target: f64 },
    /// A configuration value violates a structural constraint.
    InvalidConfig(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            Error::NonScalarLoss { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::NonFinite { op } => write!(f, "{op}: non-finite input"),
            Error::ZeroVector { op } => write!(f, "{op}: zero vector has no direction"),
            Error::TaskOutOfRange { got, count } => {
                write!(f, "task index {got} out of range (have {count} tasks)")
            }
            Error::EmptyInput(what) => write!(f, "{what}: empty input"),
            Error::ParamMismatch { missing } => {
                write!(f, "parameter sets misaligned, missing: {}", missing.join(", "))
            }
            Error::IncompleteMatrix { missing_k, missing_t } => {
                write!(f, "metric matrix missing entry k={missing_k}, t={missing_t}")
            }
            Error::ForgettingUndefined => {
                write!(f, "forgetting metrics are undefined for a single task")
            }
            Error::SingleGroup => write!(f, "cluster separation needs at least two groups"),
            Error::CapacityExceeded { requested, available } => {
                write!(f, "requested {requested} exemplars from {available} samples")
            }
            Error::PretrainBelowTarget { iou, target } => write!(
                f,
                "pretraining reached IoU {iou:.3} < {target:.3}; increase pretrain epochs or samples"
            ),
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
        }
    }
}

impl std::error::Error for Error {}
