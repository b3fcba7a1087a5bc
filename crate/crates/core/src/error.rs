use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the core engine and everything built on it.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },
    #[error("{op}: input outside domain ({detail})")]
    Domain { op: &'static str, detail: String },
    #[error("leaf node {node} (`{name}`) has no bound value")]
    Unbound { node: usize, name: String },
    #[error("node {0} does not belong to this graph")]
    UnknownNode(usize),
    #[error("loss must be a single scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("class {class} has {available} examples, episode needs {needed}")]
    NotEnoughExamples {
        class: u32,
        available: usize,
        needed: usize,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0} is not supported by this meta-learner")]
    Unsupported(&'static str),
    #[error("parameter `{0}` is missing")]
    MissingParameter(String),
    #[error("non-finite loss at iteration {iteration}: meta={meta}, disc={disc}")]
    NonFiniteLoss {
        iteration: usize,
        meta: f64,
        disc: f64,
    },
    #[error("empty input: {0}")]
    Empty(&'static str),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
