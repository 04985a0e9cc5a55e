//! Dense fp32 tensors with a recording tape for reverse-mode gradients.

mod gemm;
pub mod gradcheck;
mod tape;
mod tensor;

pub use tape::{softmax_rows, Gradients, Tape, Var, MASKED_SCORE};
pub use tensor::Tensor;
