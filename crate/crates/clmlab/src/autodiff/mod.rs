//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Gradients are built as nodes on the same tape, so a second backward pass
//! through a gradient expression yields Hessian-vector products.

mod tape;
mod tensor;

pub use tape::{Precision, Tape, VarId};
pub use tensor::Tensor;
