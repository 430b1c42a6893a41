//! Crate-wide error type.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// Two operands have incompatible shapes for the named operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An axis argument is out of range for the tensor's rank.
    InvalidAxis { axis: usize, rank: usize },
    /// A shape/data-length disagreement or an invalid shape argument.
    BadShape { op: &'static str, detail: String },
    /// Tensors from two different graphs were combined.
    GraphMismatch { op: &'static str },
    /// `backward` requires a scalar (single-element) loss.
    NotScalar { shape: Vec<usize> },
    /// `backward` was called twice without `zero_grads` in between.
    BackwardTwice,
    /// Non-finite values where finite input is required.
    NonFinite { context: String },
    /// Configuration validation failure; names the offending field or axis.
    Config(String),
    /// Checkpoint parsing/validation failure.
    Checkpoint(String),
    /// Checkpoint parameters do not fit the requested config; lists offenders.
    ShapeVsConfig { names: Vec<String> },
    /// Metric is undefined for the given input (e.g. single-class AUROC).
    UndefinedMetric(String),
    /// Training aborted: the loss became non-finite.
    Diverged { epoch: usize, step: usize },
    /// A benchmark run would exceed the configured element budget.
    BudgetExceeded { required: usize, budget: usize },
    /// Not enough benchmark points to fit a scaling exponent.
    InsufficientPoints(String),
    Io(std::io::Error),
    Json(serde_json::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            Error::InvalidAxis { axis, rank } => {
                write!(f, "axis {axis} out of range for rank {rank}")
            }
            Error::BadShape { op, detail } => write!(f, "{op}: {detail}"),
            Error::GraphMismatch { op } => {
                write!(f, "{op}: operands belong to different graphs")
            }
            Error::NotScalar { shape } => {
                write!(f, "backward requires a scalar loss, got shape {shape:?}")
            }
            Error::BackwardTwice => {
                write!(f, "backward called twice without zero_grads")
            }
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Error::ShapeVsConfig { names } => {
                write!(f, "checkpoint does not match config; offending parameters: {}", names.join(", "))
            }
            Error::UndefinedMetric(msg) => write!(f, "undefined metric: {msg}"),
            Error::Diverged { epoch, step } => {
                write!(f, "training diverged (non-finite loss) at epoch {epoch}, step {step}")
            }
            Error::BudgetExceeded { required, budget } => {
                write!(f, "element budget exceeded: need {required}, budget {budget}")
            }
            Error::InsufficientPoints(msg) => write!(f, "insufficient points: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}

pub type Result<V> = std::result::Result<V, Error>;
