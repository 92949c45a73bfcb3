//! Attention-aggregation feature pyramid network for semantic segmentation.
//!
//! The crate is organized bottom-up:
//!
//! - [`autodiff`]: tensors, the differentiation tape, Adam, gradient checks
//! - [`attention`]: dot-product, kernel and linear attention
//! - [`pyramid`]: scratch residual backbone and the top-down feature pyramid
//! - [`model`]: attention aggregation module, heads, ablation variants, checkpoints
//! - [`metrics`]: confusion matrix, OA, mIoU, F1
//! - [`synth`]: synthetic scenes, augmentation, test-time augmentation, PPM/PGM I/O
//! - [`bench`]: analytic MACC/memory models and the timing harness
//! - [`selftest`]: registry of oracle properties run by the CLI

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pyramid;
pub mod rng;
pub mod selftest;
pub mod synth;

pub use error::{Error, Result};
