//! Differentiable 2D-3D calibration between a LiDAR point cloud and a camera
//! feature grid, trained end to end on synthetic scenes.
//!
//! The pipeline encodes points and pixels, scores their similarity through a
//! learnable alignment, detects the overlapping region, matches points to
//! image coordinates and solves the extrinsic pose with an unrolled PnP solver
//! whose gradients flow back into the encoders. Everything runs on the
//! reverse-mode tape in [`autodiff`].

pub mod autodiff;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod matching;
pub mod model;
pub mod params;
pub mod pnp;
pub mod scene;
pub mod training;

pub use error::{Error, Result};
