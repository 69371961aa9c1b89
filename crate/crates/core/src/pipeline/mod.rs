//! Dataset construction: frame fusion, voxel-grid subsampling, nearest
//! neighbor search, correspondence labeling, augmentation and image
//! standardization.

pub mod cloud;
pub mod image;
pub mod io;
pub mod kdtree;
pub mod labeling;

pub use cloud::{augment_noise, grid_subsample, PointCloud};
pub use image::{standardize_image, DepthImage, Image, Standardized};
pub use kdtree::{KdTree, Neighbor};
pub use labeling::{
    fuse_frames, label_correspondences, Correspondence, CorrespondenceKind, CorrespondenceSet,
    Labeling, RgbdFrame,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Grid subsampling cell size (m).
    pub voxel_size: f64,
    /// Maximum pixel/point distance for a labeled correspondence (m).
    pub eta: f64,
    /// Pairs with fewer correspondences are unusable for training.
    pub min_correspondences: usize,
    /// Std-dev of the training-time Gaussian jitter on cloud positions (m).
    pub noise_sigma: f64,
    pub frames_per_fragment: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.015,
            eta: 0.015,
            min_correspondences: 128,
            noise_sigma: 0.005,
            frames_per_fragment: 5,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0 && self.eta > 0.0 && self.noise_sigma > 0.0) {
            return Err(Error::Config(
                "voxel_size, eta and noise_sigma must be positive".into(),
            ));
        }
        if self.min_correspondences < 1 || self.frames_per_fragment < 1 {
            return Err(Error::Config(
                "min_correspondences and frames_per_fragment must be >= 1".into(),
            ));
        }
        Ok(())
    }
}
