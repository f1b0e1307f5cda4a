//! Roadside multi-camera data synthesis.
//!
//! The crate covers the geometric half of the pipeline:
//!
//! - [`geometry`]: pinhole cameras, rigid transforms, oriented boxes.
//! - [`extrinsics`]: BFGS refinement of camera poses from 2D keypoints.
//! - [`placement`]: grid scoring, greedy sampling and collision checks for
//!   inserted assets.
//! - [`depth`]: instance-mask filtering and affine calibration of relative
//!   depth against projected LiDAR.
//! - [`render`]: software z-buffer rasterizer for compositing meshes onto
//!   background frames.
//! - [`dataset`]: on-disk scene layout, label/calibration formats and the
//!   synthetic fixture generator ([`fixture`]).
//! - [`postproc`]: pluggable full-frame image stages.

pub mod bfgs;
pub mod geometry;
pub mod extrinsics;
pub mod placement;
pub mod raster;
pub mod depth;
pub mod mesh;
pub mod render;
pub mod dataset;
pub mod fixture;
pub mod postproc;
