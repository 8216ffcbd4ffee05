//! Dense tensors and a tape-based reverse-mode differentiation engine,
//! generic over the float type (`f32` for training, `f64` for checking).

mod error;
pub mod gradcheck;
mod graph;
mod kernels;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Graph, Reduction, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;

/// Numerically stable logistic function.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    graph::sigmoid(x)
}
