//! Instance-aware visual prompt tuning for a frozen toy vision transformer.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: tensors, a tape-based reverse-mode autodiff engine, a
//!   one-sided Jacobi SVD and a counter-based Gaussian sampler.
//! * [`backbone`]: a small pre-norm ViT with the shallow and deep
//!   prompt-injection forward rules.
//! * [`prompt`]: instance prompt generation, PCA propagation between layers,
//!   the combined forward rule and parameter accounting.
//! * [`training`]: objective, AdamW, warmup-cosine schedule, training loop and
//!   the checkpoint archive format.
//! * [`inference`]: multi-round, fixed-sampling and direct prediction.
//! * [`harness`]: synthetic datasets, run configuration and the experiment
//!   commands behind the `viapt` binary.

pub mod backbone;
pub mod error;
pub mod harness;
pub mod inference;
pub mod numerics;
pub mod prompt;
pub mod training;

pub use error::{Error, Result};
