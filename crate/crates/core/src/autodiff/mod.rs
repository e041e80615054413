//! Reverse-mode differentiation over dense tensors, plus Adam.

mod adam;
mod expand;
mod graph;

pub use adam::AdamState;
pub use expand::{dense_forward, input_gradient_expression, Activation, ChainTrace, DenseNodes};
pub use graph::{softplus, BinaryOp, Bindings, Gradients, Graph, NodeId, UnaryOp};
