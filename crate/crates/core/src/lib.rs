//! Delta activation layers for temporally sparse inference on frame
//! sequences: quantized sigma-delta units, zero-skipping linear operators
//! with MAC accounting, training with an L1 temporal-sparsity penalty and
//! a learned quantization step, plus data and measurement tooling.

// `!(x > 0.0)` is how NaN gets rejected alongside nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod activation;
pub mod data;
pub mod delta;
mod error;
pub mod network;
pub mod ops;
pub mod presets;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
