//! Differentiable architecture search over combined-kernel depthwise blocks.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense tensors, direct-loop kernels and a
//!   reverse-mode tape.
//! - [`nn`]: parameter storage, initialisation, optimizers and schedules.
//! - [`space`]: candidate blocks, the six-position supernet, derived
//!   networks and the analytic cost model.
//! - [`search`]: architecture weights, top-k straight-through gating and
//!   the alternating bilevel search loop.
//! - [`neck`]: training heads and metric-learning losses.
//! - [`eval`]: synthetic data, identity-balanced sampling, retrieval
//!   metrics and brute-force oracles.

pub mod autodiff;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod model;
pub mod neck;
pub mod nn;
pub mod search;
pub mod space;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Element, ElementType, Tensor};
