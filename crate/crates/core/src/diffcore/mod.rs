//! Dense float64 tensors and a tape-based reverse-mode differentiation engine.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use tape::{gelu_scalar, Gradients, Tape, Var};
pub use tensor::Tensor;


#[cfg(test)]
mod tests;
