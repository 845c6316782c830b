//! Progressive RGB-D reconstruction with online semantic and instance
//! segmentation.
//!
//! Frames are integrated into a sparse TSDF voxel map. Per-pixel class
//! predictions are fused into every voxel as a single best label with a
//! confidence. Active voxels are grouped into super-voxels by one local
//! k-means iteration per frame, the super-voxel graph is split into object
//! proposals, and a higher-order CRF over the super-voxels refines the labels
//! each frame.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod color;
pub mod crf;
pub mod error;
pub mod frame_io;
pub mod geometry;
pub mod instance;
pub mod kv;
pub mod labels;
pub mod metrics;
pub mod pipeline;
pub mod proposal;
pub mod supervoxel;
pub mod voxel_map;

pub use error::{Error, Result};
