use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Every failure the core can report.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for `op`.
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// Operand has the wrong number of dimensions.
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    /// A class index is outside the logit width.
    Label { label: usize, classes: usize },
    /// Nothing left to average over (empty graph, fully masked batch, ...).
    Degenerate(String),
    /// Optimizer was handed a parameter that never received a gradient.
    MissingGradient { name: String },
    /// Invalid hyperparameters or construction arguments.
    Config(String),
    /// Data does not satisfy the dataset schema.
    Schema(String),
    /// Node or instance index outside the valid range.
    Index { index: usize, len: usize },
    /// A class has fewer instances than the split requires.
    InsufficientData { class: usize, have: usize, need: usize },
    /// Edge-prediction pretraining cannot run.
    Pretrain(String),
    /// Required bookkeeping is absent (e.g. prompts for the consistency term).
    Contract(String),
    /// A metric is undefined for the given input.
    Undefined(String),
    /// Training produced a non-finite loss.
    NumericalAbort {
        lr: f64,
        epoch: usize,
        batch: usize,
        loss: f64,
        grad_norms: Vec<(String, f64)>,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn rank(op: &'static str, expected: usize, shape: &[usize]) -> Self {
        Error::Rank {
            op,
            expected,
            shape: shape.to_vec(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, left, right } => {
                write!(f, "{op}: incompatible shapes {left:?} and {right:?}")
            }
            Error::Rank {
                op,
                expected,
                shape,
            } => write!(f, "{op}: expected rank {expected}, got shape {shape:?}"),
            Error::Label { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            Error::Degenerate(msg) => write!(f, "degenerate input: {msg}"),
            Error::MissingGradient { name } => write!(f, "parameter `{name}` has no gradient"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Schema(msg) => write!(f, "schema error: {msg}"),
            Error::Index { index, len } => write!(f, "index {index} out of range (len {len})"),
            Error::InsufficientData { class, have, need } => write!(
                f,
                "class {class} has {have} instances, split needs {need}"
            ),
            Error::Pretrain(msg) => write!(f, "pretraining error: {msg}"),
            Error::Contract(msg) => write!(f, "contract violated: {msg}"),
            Error::Undefined(msg) => write!(f, "undefined: {msg}"),
            Error::NumericalAbort {
                lr,
                epoch,
                batch,
                loss,
                ..
            } => write!(
                f,
                "non-finite loss {loss} at epoch {epoch}, batch {batch} (lr {lr})"
            ),
        }
    }
}

impl core::error::Error for Error {}
