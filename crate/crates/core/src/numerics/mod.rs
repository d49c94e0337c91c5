//! Dense tensors and reverse-mode differentiation.

mod graph;
mod real;
mod tensor;

pub use graph::{cv_squared, Graph, Var, LAYER_NORM_EPS};
pub(crate) use graph::{dot, layer_norm_row, masked_softmax, sigmoid, squared_relu};
pub use real::Real;
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
