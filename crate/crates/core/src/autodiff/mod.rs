//! Reverse-mode automatic differentiation over per-batch computation graphs.

mod gemm;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::finite_diff_check;
pub use graph::{Graph, NodeId, Padding, SparseLayout};
pub use params::{Gradients, ParamId, Parameter, ParameterSet, Partition};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("node {node} ({op}): expected shape {expected:?}, got {actual:?}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("input node {0} was not fed")]
    MissingFeed(usize),
    #[error("node {0} was fed but is not an input")]
    NotAnInput(usize),
    #[error("loss node {node} must be scalar, has shape {shape:?}")]
    NonScalarLoss { node: usize, shape: Vec<usize> },
    #[error("backward called before forward")]
    NotEvaluated,
    #[error("duplicate parameter name {0:?}")]
    DuplicateParam(String),
    #[error("{0}")]
    Invalid(String),
}
