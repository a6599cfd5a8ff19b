//! Quantization-aware imitation learning toolkit.

// `!(x > 0.0)` is how validation rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod envs;
pub mod error;
pub mod imitation;
pub mod kernels;
pub mod parallel;
pub mod policy;
pub mod qarl;
pub mod quant;
pub mod saliency;
pub mod tensor;

pub use error::{CheckpointError, Error, Result};
pub use tensor::{Adam, NodeId, Tape, Tensor};
