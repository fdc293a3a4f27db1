//! Tape-based reverse-mode automatic differentiation on dense f64 tensors.

pub mod gradcheck;
mod matmul;
pub mod tape;
pub mod tensor;

pub use tape::{sigmoid, GruCellIds, Tape, TensorId};
pub use tensor::Tensor;
