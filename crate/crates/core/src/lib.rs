//! Contrastive-loss laboratory: the pairwise sigmoid loss and the softmax
//! contrastive baseline with analytic gradients, a simulated chunked
//! multi-device evaluator, and a small training harness.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod checks;
pub mod chunked;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod math;
pub mod model;
pub mod optim;

pub use error::{Error, Result};
pub use math::Matrix;
