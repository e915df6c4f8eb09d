//! Tensor container, seeded generator, and the differentiation contract.

pub mod gradcheck;
pub mod resample;
mod rng;
pub mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use rng::{mix64, Rng};
pub use tape::{Backward, Gradients, Tape, Var};
pub use tensor::{elementwise, matmul, reduce, softmax, transpose2, ElementwiseOp, FeatureMap, ReduceOp, Tensor};
pub(crate) use tensor::softmax_slice;
