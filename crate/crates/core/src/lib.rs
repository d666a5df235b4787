//! Contrastive 3D point-cloud pretraining driven by synthesized monocular
//! depth and fixed 2D positional-encoding targets.
//!
//! The pipeline runs: depth map → metric depth → back-projection →
//! grid sampling → view mixup → strong augmentations → per-point target
//! sampling → point encoder + projection heads → InfoNCE → SGD.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod augment;
pub mod camera;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod loss;
pub mod nn;
pub mod par;
pub mod pcd;
pub mod raster;
pub mod synth;
pub mod targets;
pub mod train;

pub use error::{Error, Result};
