//! Joint keypoint detection and description for pixel-to-point matching
//! between RGB images and 3D point clouds.

pub mod autodiff;
pub mod detection;
pub mod error;
pub mod extractors;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod registration;

pub use error::{Error, Result};
