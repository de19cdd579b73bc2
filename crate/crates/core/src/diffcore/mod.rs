//! Minimal reverse-mode automatic differentiation over dense binary64 matrices.

mod graph;
mod mlp;
mod tensor;

pub use graph::{smooth_relu, smooth_relu_grad, Gradients, Graph, Var};
pub use mlp::{
    mlp_forward, mlp_input_gradient, mlp_value_and_input_gradient, Activation, AffineMap, BoundLayer, BoundMlp,
    Layer, MlpNet,
};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("backward needs a scalar root, got a {0}x{1} node")]
    NotScalar(usize, usize),
    #[error("activation error: {0}")]
    Activation(String),
    #[error("domain error: {0}")]
    Domain(String),
}
