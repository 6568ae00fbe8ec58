use thiserror::Error;

use crate::tensor::DType;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the runtime can report.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    // tensors
    #[error("data length {actual} does not match shape element count {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("value {value} is not representable as {dtype}")]
    NarrowingOverflow { value: f64, dtype: DType },
    #[error("symbolic tensor has no concrete value; it only exists inside the trace that produced it")]
    SymbolicTensor,
    #[error("shapes {a:?} and {b:?} cannot be broadcast together")]
    BroadcastIncompatible { a: Vec<Option<usize>>, b: Vec<Option<usize>> },
    #[error("dtype mismatch: expected {expected}, got {actual}")]
    DTypeMismatch { expected: DType, actual: DType },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    // op registry and dispatch
    #[error("op `{0}` is already registered")]
    DuplicateOp(String),
    #[error("unknown op `{0}`")]
    UnknownOp(String),
    #[error("op `{op}` expects {expected} inputs, got {actual}")]
    ArityMismatch { op: String, expected: String, actual: usize },
    #[error("op `{op}`: {message}")]
    AttrMismatch { op: String, message: String },
    #[error("kernel error{}: {message}", node.map(|n| format!(" at node {n}")).unwrap_or_default())]
    Kernel { node: Option<u32>, message: String },

    // tapes
    #[error("tape ended out of order; only the innermost active tape may end")]
    NonNestedEnd,
    #[error("tape is not active")]
    InactiveTape,
    #[error("gradient target must be a scalar, got shape {0:?}")]
    NonScalarTarget(Vec<Option<usize>>),
    #[error("gradient source is not watched by this tape")]
    UnwatchedSource,
    #[error("non-persistent tape already computed a gradient")]
    ConsumedTape,

    // staging
    #[error("arguments do not match the pinned input signature: {0}")]
    SignatureMismatch(String),
    #[error("staging failed: {0}")]
    Staging(String),
    #[error("variable creation is only allowed on the first trace: {0}")]
    VariableCreation(String),
    #[error("argument {0} cannot be encoded into a trace key")]
    UnencodableArgument(usize),
    #[error("no concrete function cached for the requested key")]
    MissingConcreteFunction,

    // graphs
    #[error("graph input mismatch: {0}")]
    InputMismatch(String),
    #[error("function `{0}` not found in the enclosing library")]
    MissingFunction(String),
    #[error("graph `{0}` contains host callbacks and cannot be serialized")]
    NotSerializable(String),
    #[error("unsupported format version {found} (expected {expected})")]
    FormatVersionMismatch { expected: u32, found: u32 },
    #[error("corrupt graph data: {0}")]
    CorruptGraph(String),

    // state
    #[error("variable {0} no longer exists")]
    DeadVariable(u64),
    #[error("storage error: {0}")]
    Storage(String),
    #[error("checkpoint value conflict at `{path}`: {message}")]
    DTypeOrShapeConflict { path: String, message: String },

    // devices
    #[error("unknown device `{0}`")]
    UnknownDevice(String),

    // host callbacks
    #[error("host callback failed: {0}")]
    Callback(String),
    #[error("host callback output does not match its declared signature: {0}")]
    SignatureViolation(String),
}

impl Error {
    pub(crate) fn kernel(message: impl Into<String>) -> Self {
        Error::Kernel { node: None, message: message.into() }
    }

    pub(crate) fn attr(op: &str, message: impl Into<String>) -> Self {
        Error::AttrMismatch { op: op.to_string(), message: message.into() }
    }

    pub(crate) fn at_node(self, id: u32) -> Self {
        match self {
            Error::Kernel { node: None, message } => Error::Kernel { node: Some(id), message },
            other => other,
        }
    }
}
