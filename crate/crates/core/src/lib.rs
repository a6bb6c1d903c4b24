//! Dual-branch monocular depth estimation with uncertainty-rectified
//! cross-distillation.
//!
//! A windowed-attention branch and a convolutional branch are trained
//! together: each uses the other's depth as a pseudo-label, down-weighted by
//! predicted per-pixel uncertainty, while coupling units feed attention
//! features into the convolutional encoder. Only the attention branch is
//! needed at inference time.

pub mod augmentation;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    clamp_depth, valid_mask_of, BranchOutput, BranchTensors, DepthMap, DepthRange, RgbImage,
    Sample, UncertaintyMap, ValidMask,
};
