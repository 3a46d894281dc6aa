//! Scene coordinate regression with error-guided feature selection.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: pinhole camera, camera-to-world poses, projection and
//!   reprojection error, SE(3) exp/log.
//! - [`synth`]: synthetic scenes with labelled contamination and the on-disk
//!   dataset format.
//! - [`regressor`]: the per-patch coordinate/confidence MLP, its joint loss and
//!   analytic gradients, Adam training and checkpoints.
//! - [`egfs`]: error maps, prompt selection, region expansion, confidence
//!   refinement, buffer construction and the iterative training driver.
//! - [`pose_solver`]: confidence prefilter, P3P, RANSAC and Levenberg-Marquardt.
//! - [`eval`]: pose metrics, per-region analysis and point-cloud export.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise. Results are
//! identical either way.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod egfs;
pub mod eval;
pub mod geometry;
pub mod par;
pub mod pose_solver;
pub mod regressor;
pub mod rng;
pub mod stats;
pub mod synth;

pub use geometry::{CameraIntrinsics, PixelPoint, Pose, SceneCoordinate};
