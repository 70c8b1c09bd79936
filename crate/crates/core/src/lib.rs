//! Map-based visual localization with attention-weighted keypoints.
//!
//! A map stores, per mapping image, a sparse set of keypoints chosen by
//! (weighted) farthest point sampling with their descriptors and 3D
//! positions. Online, the keypoints are projected into the query image's
//! dense descriptor maps under a grid of candidate pose offsets; the
//! resulting cost volume is collapsed into per-axis distributions whose
//! expectations refine the prior pose, coarse to fine over three scales.

pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
mod io;
pub mod losses;
pub mod map;
pub mod matching;
pub mod pipeline;
pub mod selection;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::{apply_offset, CameraModel, Point3, Pose3, PoseSE2Offset};
