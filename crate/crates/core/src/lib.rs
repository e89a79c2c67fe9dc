//! Streaming video object segmentation with a fixed-footprint long-term memory.
//!
//! The long-term memory keeps a reference slot and a single dynamic slot; the
//! dynamic slot is refreshed every `delta` frames by modulated cross-attention
//! (attention keys from the old slot, values from a focal-modulation aggregate
//! of it). Baseline growth policies are included for comparison.

pub mod autodiff;
pub mod bench;
pub mod eltt;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod memory;
pub mod params;
pub mod segmenter;
pub mod synthgen;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DepthwiseKernel, LinearProjection, Precision, Scalar, Tensor};
