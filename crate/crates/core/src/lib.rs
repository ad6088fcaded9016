//! Hybrid egocentric camera localization.
//!
//! Frames of an egocentric video get camera poses from two sources: an
//! incremental structure-from-motion reconstruction over feature tracks, and
//! per-frame PnP relocalization against known 3D scan keypoints. SfM poses are
//! brought into the scan frame with a similarity fit over shared frames and the
//! two pose sets are merged, so frames where SfM fails can still be used.
//! Detected 2D object centers with depth are then lifted to 3D world points
//! and scored against ground truth.
//!
//! Every stage can be checked against [`synthworld`], which generates scenes
//! with exact truth.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod evalkit;
pub mod fuse;
pub mod geometry;
pub mod io;
pub mod pipeline;
pub mod plot;
pub mod pnp;
pub mod sfm;
pub mod synthworld;
pub mod vq3d;

pub use error::{Error, Result};
pub use geometry::{Intrinsics, Mat3, Pixel, Pose, PoseTable, Provenance, Sim3, Vec3};
