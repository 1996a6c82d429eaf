//! Batch normalization with decoupled gradient and normalization batches,
//! plus evaluation-time statistic corrections (EvalNorm).
//!
//! The crate is `no_std` (it needs `alloc`). It contains:
//!
//! * [`tensor`] and [`tape`]: dense `f64` tensors and a reverse-mode tape with
//!   an explicit [`Tape::stop_gradient`] marker.
//! * [`normalization`]: moment algebra, training-time batch normalization,
//!   EMA tracking, and the evaluation paths (EMA, fixed-α, EvalNorm).
//! * [`estimator`]: the auxiliary loss that fits the per-layer mixing weights
//!   (α̂, β̂), offline or online.
//! * [`model`], [`data`], [`train`]: small reference models, deterministic data
//!   sources and the microbatched training loop.
//!
//! All variances are population (biased) variances. The combined-moment
//! identity used throughout is exact only under that convention.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod data;
mod error;
pub mod estimator;
pub mod model;
pub mod normalization;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
