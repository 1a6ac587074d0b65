//! Dense float64 tensors and reverse-mode differentiation.

mod graph;
mod tensor;

pub use graph::{Graph, Segment, Var};
pub use tensor::{argmax, log_softmax, Tensor};

/// Default layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("numeric error: {0}")]
    NonFinite(String),
    #[error("contract violation: {0}")]
    Contract(String),
}
