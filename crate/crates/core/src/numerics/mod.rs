//! Dense tensors, reverse-mode differentiation and the finite-difference oracle.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{SubsetRoutes, Tape, Var};
pub use tensor::{matmul, rmsnorm, silu, softmax, Tensor};

pub(crate) use tape::argmax;
pub(crate) use tensor::softmax_in_place;
