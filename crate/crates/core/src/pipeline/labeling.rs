use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cloud::PointCloud;
use super::image::{DepthImage, Image};
use super::kdtree::KdTree;
use super::PipelineConfig;
use crate::error::{Error, Result};
use crate::geometry::{in_frustum, CameraIntrinsics, RigidTransform};

/// One RGB-D frame; `pose` maps camera coordinates to the world frame.
#[derive(Debug, Clone)]
pub struct RgbdFrame {
    pub depth: DepthImage,
    pub color: Image,
    pub pose: RigidTransform,
    pub intrinsics: CameraIntrinsics,
}

/// Unprojects every valid pixel of every frame into the world frame.
pub fn fuse_frames(frames: &[RgbdFrame]) -> Result<PointCloud> {
    if frames.is_empty() {
        return Err(Error::invalid("cannot fuse an empty frame list"));
    }
    let mut points = Vec::new();
    let mut colors = Vec::new();
    for f in frames {
        if f.color.channels != 3
            || f.color.width != f.depth.width
            || f.color.height != f.depth.height
        {
            return Err(Error::invalid("color image must be RGB and match the depth grid"));
        }
        for idx in f.depth.valid_indices() {
            let pc = f.depth.lift(idx, &f.intrinsics).expect("valid depth");
            points.push(f.pose.apply(&pc));
            let c = f.color.pixel(idx);
            colors.push([c[0], c[1], c[2]]);
        }
    }
    PointCloud::new(points, Some(colors))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrespondenceKind {
    GroundTruth,
    Predicted,
    DetectedPair,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub pixel: usize,
    pub point: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet {
    pub kind: CorrespondenceKind,
    pub pairs: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn new(kind: CorrespondenceKind, pairs: Vec<Correspondence>) -> Self {
        Self { kind, pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Index range checks, plus per-pixel uniqueness for ground truth.
    pub fn validate(&self, num_pixels: usize, num_points: usize) -> Result<()> {
        let mut seen = vec![false; num_pixels];
        for c in &self.pairs {
            if c.pixel >= num_pixels || c.point >= num_points {
                return Err(Error::Data(format!(
                    "correspondence ({}, {}) out of range",
                    c.pixel, c.point
                )));
            }
            if self.kind == CorrespondenceKind::GroundTruth {
                if seen[c.pixel] {
                    return Err(Error::Data(format!("duplicate pixel {} in ground truth", c.pixel)));
                }
                seen[c.pixel] = true;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Labeling {
    pub set: CorrespondenceSet,
    /// False when fewer than `min_correspondences` pairs were found.
    pub usable: bool,
}

/// Pairs each valid pixel with its nearest in-frustum cloud point when the
/// distance is below `eta`. Pairs come out sorted by pixel index.
pub fn label_correspondences(
    depth: &DepthImage,
    k: &CameraIntrinsics,
    pose: &RigidTransform,
    cloud: &PointCloud,
    cfg: &PipelineConfig,
) -> Labeling {
    let world_to_cam = pose.inverse();
    let frustum: Vec<usize> = (0..cloud.len())
        .filter(|&i| in_frustum(&cloud.points[i], k, &world_to_cam))
        .collect();
    let tree = KdTree::build(&cloud.select(&frustum).points);
    let valid: Vec<usize> = depth.valid_indices().collect();
    let pairs: Vec<Correspondence> = valid
        .par_iter()
        .filter_map(|&pix| {
            let world = pose.apply(&depth.lift(pix, k)?);
            let nn = tree.nearest(&world)?;
            (nn.distance < cfg.eta).then(|| Correspondence {
                pixel: pix,
                point: frustum[nn.index],
                distance: nn.distance,
            })
        })
        .collect();
    let usable = pairs.len() >= cfg.min_correspondences;
    Labeling {
        set: CorrespondenceSet::new(CorrespondenceKind::GroundTruth, pairs),
        usable,
    }
}
