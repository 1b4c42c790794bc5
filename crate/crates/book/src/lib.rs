//! Compiles the listings of the guide in `book/` as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/sigmoid-loss.md")]
pub mod sigmoid_loss {}

#[doc = include_str!("../../../book/src/softmax-baseline.md")]
pub mod softmax_baseline {}

#[doc = include_str!("../../../book/src/chunked.md")]
pub mod chunked {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}

#[doc = include_str!("../../../book/src/verification.md")]
pub mod verification {}
