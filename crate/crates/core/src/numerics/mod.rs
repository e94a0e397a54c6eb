//! Numeric substrate: dense tensors, reverse-mode differentiation, SVD and
//! deterministic sampling.

pub mod gradcheck;
pub mod kernels;
pub mod linalg;
mod real;
pub mod rng;
pub mod svd;
pub mod tape;
mod tensor;

pub use real::{DType, Real};
pub use rng::RngState;
pub use svd::{svd_topk, Svd};
pub use tape::{BackwardFault, Gradients, Tape, Var};
pub use tensor::Tensor;
