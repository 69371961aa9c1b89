//! Mutual nearest-neighbor matching and the evaluation metrics: inlier
//! ratio, feature matching recall, keypoint repeatability, recall and
//! registration recall. Every threshold test is strict.

use std::io::Write;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Point3, RigidTransform};
use crate::pipeline::{DepthImage, KdTree};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricThresholds {
    /// Inlier-ratio threshold for FMR.
    pub tau1: f64,
    /// Inlier distance (m).
    pub tau2: f64,
    /// Repeatability distance (m).
    pub tau3: f64,
    /// Registration RMSE (m).
    pub tau4: f64,
}

impl Default for MetricThresholds {
    fn default() -> Self {
        Self {
            tau1: 0.5,
            tau2: 0.045,
            tau3: 0.02,
            tau4: 0.05,
        }
    }
}

impl MetricThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau1 > 0.0 && self.tau1 <= 1.0) {
            return Err(Error::Config("tau1 must lie in (0, 1]".into()));
        }
        if !(self.tau2 > 0.0 && self.tau3 > 0.0 && self.tau4 > 0.0) {
            return Err(Error::Config("tau2, tau3 and tau4 must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub pixel: usize,
    pub point: usize,
    pub similarity: f64,
}

/// Mutual nearest-neighbor matches, sorted by pixel index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchSet {
    pub matches: Vec<Match>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.matches.iter().map(|m| (m.pixel, m.point)).collect()
    }

    /// Re-index through keypoint lists (`pixel` and `point` become
    /// `pixel_ids[pixel]`, `point_ids[point]`).
    pub fn remap(&self, pixel_ids: &[usize], point_ids: &[usize]) -> MatchSet {
        let mut matches: Vec<Match> = self
            .matches
            .iter()
            .map(|m| Match {
                pixel: pixel_ids[m.pixel],
                point: point_ids[m.point],
                similarity: m.similarity,
            })
            .collect();
        matches.sort_by_key(|m| (m.pixel, m.point));
        MatchSet { matches }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest row of `ys` for every row of `xs` by Euclidean distance; ties go
/// to the lower index.
fn nearest_rows(xs: &Tensor, ys: &Tensor) -> Vec<usize> {
    let (n, _) = xs.dims2().unwrap_or((0, 0));
    let (z, _) = ys.dims2().unwrap_or((0, 0));
    (0..n)
        .map(|i| {
            let mut best = (f64::INFINITY, 0);
            for j in 0..z {
                let d = sq_dist(xs.row(i), ys.row(j));
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect()
}

/// Pairs `(i, j)` where `Y_j` is the nearest descriptor to `X_i` and `X_i`
/// the nearest to `Y_j`.
pub fn mutual_nn_match(desc_x: &Tensor, desc_y: &Tensor) -> Result<MatchSet> {
    let (n, c) = desc_x.dims2()?;
    let (z, c2) = desc_y.dims2()?;
    if c != c2 {
        return Err(Error::invalid(format!("descriptor widths differ: {c} vs {c2}")));
    }
    if n == 0 || z == 0 {
        return Ok(MatchSet::default());
    }
    let fwd = nearest_rows(desc_x, desc_y);
    let bwd = nearest_rows(desc_y, desc_x);
    let matches = fwd
        .iter()
        .enumerate()
        .filter(|&(i, &j)| bwd[j] == i)
        .map(|(i, &j)| Match {
            pixel: i,
            point: j,
            similarity: desc_x.row(i).iter().zip(desc_y.row(j)).map(|(a, b)| a * b).sum(),
        })
        .collect();
    Ok(MatchSet { matches })
}

/// What Γ needs, plus the cloud the matches index into.
#[derive(Debug, Clone, Copy)]
pub struct PairGeometry<'a> {
    pub depth: &'a DepthImage,
    pub intrinsics: &'a CameraIntrinsics,
    pub cloud: &'a [Point3],
}

impl PairGeometry<'_> {
    /// `||Γ(x) - T⁻¹ y||`; `None` when the pixel has no valid depth.
    pub fn residual(&self, pose_inv: &RigidTransform, pixel: usize, point: usize) -> Option<f64> {
        let x = self.depth.lift(pixel, self.intrinsics)?;
        Some((x - pose_inv.apply(&self.cloud[point])).norm())
    }
}

/// A metric value with the bookkeeping behind it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measured {
    pub value: f64,
    /// The denominator set was empty; `value` is the 0 convention.
    pub empty: bool,
    /// Items skipped or counted as failures for lack of depth.
    pub invalid_depth: usize,
}

impl Measured {
    fn empty() -> Self {
        Self {
            value: 0.0,
            empty: true,
            invalid_depth: 0,
        }
    }
}

fn count_correct(pairs: &[(usize, usize)], geom: &PairGeometry<'_>, pose: &RigidTransform, tau2: f64) -> (usize, usize) {
    let inv = pose.inverse();
    let mut correct = 0;
    let mut invalid = 0;
    for &(i, j) in pairs {
        match geom.residual(&inv, i, j) {
            Some(r) if r < tau2 => correct += 1,
            Some(_) => {}
            None => invalid += 1,
        }
    }
    (correct, invalid)
}

/// Fraction of matches whose residual under `pose` is below `tau2`. Matches
/// on depth-invalid pixels count as outliers.
pub fn inlier_ratio(pairs: &[(usize, usize)], geom: &PairGeometry<'_>, pose: &RigidTransform, tau2: f64) -> Measured {
    if pairs.is_empty() {
        return Measured::empty();
    }
    let (correct, invalid) = count_correct(pairs, geom, pose, tau2);
    if invalid > 0 {
        warn!("{invalid} matches reference pixels without depth; counted as outliers");
    }
    Measured {
        value: correct as f64 / pairs.len() as f64,
        empty: false,
        invalid_depth: invalid,
    }
}

/// Fraction of pairs whose inlier ratio is above `tau1`.
pub fn feature_matching_recall(inlier_ratios: &[f64], tau1: f64) -> Result<f64> {
    if inlier_ratios.is_empty() {
        return Err(Error::invalid("feature matching recall needs at least one pair"));
    }
    Ok(inlier_ratios.iter().filter(|&&r| r > tau1).count() as f64 / inlier_ratios.len() as f64)
}

/// Fraction of image keypoints whose nearest detected cloud keypoint (in
/// the camera frame) lies within `tau3`. Keypoints without depth cannot be
/// lifted and are left out of the denominator.
pub fn keypoint_repeatability(
    kps_image: &[usize],
    kps_cloud: &[usize],
    geom: &PairGeometry<'_>,
    pose: &RigidTransform,
    tau3: f64,
) -> Measured {
    let inv = pose.inverse();
    let aligned: Vec<Point3> = kps_cloud.iter().map(|&j| inv.apply(&geom.cloud[j])).collect();
    let lifted: Vec<Point3> = kps_image
        .iter()
        .filter_map(|&i| geom.depth.lift(i, geom.intrinsics))
        .collect();
    let invalid = kps_image.len() - lifted.len();
    if lifted.is_empty() || aligned.is_empty() {
        return Measured {
            invalid_depth: invalid,
            ..Measured::empty()
        };
    }
    let tree = KdTree::build(&aligned);
    let hits = lifted
        .iter()
        .filter(|x| tree.nearest(x).is_some_and(|nn| nn.distance < tau3))
        .count();
    Measured {
        value: hits as f64 / lifted.len() as f64,
        empty: false,
        invalid_depth: invalid,
    }
}

/// Correct predicted matches over the number of ground-truth matches.
pub fn recall(
    pairs: &[(usize, usize)],
    ground_truth_count: usize,
    geom: &PairGeometry<'_>,
    pose: &RigidTransform,
    tau2: f64,
) -> Result<f64> {
    if ground_truth_count == 0 {
        return Err(Error::invalid("recall needs at least one ground-truth match"));
    }
    let (correct, _) = count_correct(pairs, geom, pose, tau2);
    Ok(correct as f64 / ground_truth_count as f64)
}

/// RMSE of ground-truth correspondences under an estimated pose. Pairs
/// whose pixel lacks depth are dropped; the count is returned alongside.
pub fn registration_rmse(
    estimate: &RigidTransform,
    ground_truth: &[(usize, usize)],
    geom: &PairGeometry<'_>,
) -> Option<(f64, usize)> {
    let inv = estimate.inverse();
    let mut sum = 0.0;
    let mut used = 0usize;
    for &(i, j) in ground_truth {
        if let Some(r) = geom.residual(&inv, i, j) {
            sum += r * r;
            used += 1;
        }
    }
    let dropped = ground_truth.len() - used;
    if dropped > 0 {
        warn!("{dropped} ground-truth pairs without depth dropped from the RMSE");
    }
    (used > 0).then(|| ((sum / used as f64).sqrt(), dropped))
}

/// Fraction of pairs recovered: a pair counts when registration produced a
/// pose and its RMSE is below `tau4`. `None` RMSEs are failures.
pub fn registration_recall(rmses: &[Option<f64>], tau4: f64) -> Result<f64> {
    if rmses.is_empty() {
        return Err(Error::invalid("registration recall needs at least one pair"));
    }
    Ok(rmses.iter().filter(|r| r.is_some_and(|v| v < tau4)).count() as f64 / rmses.len() as f64)
}

/// Metrics of one evaluated pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub name: String,
    pub n_keypoints_image: usize,
    pub n_keypoints_cloud: usize,
    pub n_matches: usize,
    pub inlier_ratio: f64,
    pub keypoint_repeatability: f64,
    pub recall: f64,
    /// `None` when registration failed.
    pub registration_rmse: Option<f64>,
    pub registered: bool,
}

/// Aggregate over evaluated pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    #[serde(rename = "FMR")]
    pub fmr: f64,
    #[serde(rename = "IR_mean")]
    pub ir_mean: f64,
    #[serde(rename = "KR_mean")]
    pub kr_mean: f64,
    #[serde(rename = "Recall_mean")]
    pub recall_mean: f64,
    #[serde(rename = "RegRecall")]
    pub reg_recall: f64,
    pub n_pairs: usize,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn summarize(pairs: &[PairMetrics], t: &MetricThresholds) -> Result<MetricsSummary> {
    let irs: Vec<f64> = pairs.iter().map(|p| p.inlier_ratio).collect();
    let rmses: Vec<Option<f64>> = pairs.iter().map(|p| p.registration_rmse).collect();
    Ok(MetricsSummary {
        fmr: feature_matching_recall(&irs, t.tau1)?,
        ir_mean: mean(irs.iter().copied()),
        kr_mean: mean(pairs.iter().map(|p| p.keypoint_repeatability)),
        recall_mean: mean(pairs.iter().map(|p| p.recall)),
        reg_recall: registration_recall(&rmses, t.tau4)?,
        n_pairs: pairs.len(),
    })
}

pub fn write_pair_metrics_csv(path: &Path, pairs: &[PairMetrics]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "pair,n_kp_image,n_kp_cloud,n_matches,IR,KR,Recall,reg_rmse,registered").unwrap();
    for p in pairs {
        let rmse = p.registration_rmse.map(|r| format!("{r:.9}")).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{:.9},{:.9},{:.9},{},{}",
            p.name,
            p.n_keypoints_image,
            p.n_keypoints_cloud,
            p.n_matches,
            p.inlier_ratio,
            p.keypoint_repeatability,
            p.recall,
            rmse,
            p.registered as u8
        )
        .unwrap();
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
