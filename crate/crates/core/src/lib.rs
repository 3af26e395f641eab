//! Synthetic 360° indoor panorama rendering and equirectangular depth estimation.
//!
//! The crate covers the full desk-scale pipeline:
//! ray-cast ground-truth (color, depth, mask) panoramas from analytic scenes,
//! train the two equirectangular depth networks on them with a multi-scale
//! masked loss, and evaluate predictions with standard depth metrics.

pub mod error;
pub mod formats;
pub mod geometry;
pub mod metrics;
pub mod models;
pub mod raster;
pub mod render;
pub mod rng;
pub mod scene;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
