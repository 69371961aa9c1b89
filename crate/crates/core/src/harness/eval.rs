//! Test-time pipeline: extract, detect, top-k, mutual matching, metrics and
//! RANSAC-PnP registration for every test pair.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::Config;
use super::dataset::{content_hash, file_hash, load_pairs, pair_dir, DatasetIndex};
use super::manifest::RunManifest;
use super::derive_seed;
use crate::autodiff::{ParamSet, Tensor};
use crate::detection::{detect_keypoints, detection_map, soft_scores, write_keypoints_csv, ScoreMap};
use crate::error::{Error, Result};
use crate::extractors::{extract_2d, extract_3d, CLOUD_GAIN, IMAGE_GAIN};
use crate::geometry::{Pixel, RigidTransform};
use crate::metrics::{
    inlier_ratio, keypoint_repeatability, mutual_nn_match, recall, registration_rmse, summarize, write_pair_metrics_csv,
    MatchSet, MetricsSummary, PairGeometry, PairMetrics,
};
use crate::pipeline::io::PairData;
use crate::pipeline::standardize_image;
use crate::registration::{ransac_pnp, PnpMatch};

const SEED_RANSAC: u64 = 20;

pub const METRICS_FILE: &str = "metrics.json";
pub const PAIRS_CSV: &str = "pairs.csv";
pub const POSES_FILE: &str = "poses.json";
pub const KEYPOINTS_DIR: &str = "keypoints";

/// Rows `idx` of a `[T, C]` tensor.
pub fn select_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (_, c) = t.dims2()?;
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::matrix(idx.len(), c, data)
}

/// Everything computed for one pair.
#[derive(Debug, Clone)]
pub struct PairEvaluation {
    pub metrics: PairMetrics,
    pub keypoints_image: Vec<usize>,
    pub keypoints_cloud: Vec<usize>,
    pub scores_image: ScoreMap,
    pub scores_cloud: ScoreMap,
    pub matches: MatchSet,
    pub estimate: Option<RigidTransform>,
}

/// Metrics and registration for given keypoints and their descriptors
/// (rows aligned with the keypoint lists).
pub fn evaluate_matches(
    pair: &PairData,
    keypoints_image: &[usize],
    keypoints_cloud: &[usize],
    desc_image: &Tensor,
    desc_cloud: &Tensor,
    cfg: &Config,
    ransac_seed: u64,
) -> Result<(PairMetrics, MatchSet, Option<RigidTransform>)> {
    let matches = mutual_nn_match(desc_image, desc_cloud)?.remap(keypoints_image, keypoints_cloud);
    let geom = PairGeometry {
        depth: &pair.depth,
        intrinsics: &pair.intrinsics,
        cloud: &pair.cloud.points,
    };
    let t = &cfg.metrics;
    let pairs = matches.pairs();
    let ir = inlier_ratio(&pairs, &geom, &pair.pose, t.tau2);
    let kr = keypoint_repeatability(keypoints_image, keypoints_cloud, &geom, &pair.pose, t.tau3);
    let gt: Vec<(usize, usize)> = pair.correspondences.pairs.iter().map(|c| (c.pixel, c.point)).collect();
    let rec = if gt.is_empty() {
        warn!("{}: no ground-truth correspondences, recall set to 0", pair.name);
        0.0
    } else {
        recall(&pairs, gt.len(), &geom, &pair.pose, t.tau2)?
    };
    let pnp: Vec<PnpMatch> = pairs
        .iter()
        .map(|&(i, j)| PnpMatch {
            pixel: Pixel::from_index(i, pair.intrinsics.width),
            point: pair.cloud.points[j],
            lifted: pair.depth.lift(i, &pair.intrinsics),
        })
        .collect();
    let mut rc = cfg.ransac.clone();
    rc.seed = ransac_seed;
    let estimate = match ransac_pnp(&pnp, &pair.intrinsics, &rc) {
        Ok(r) => Some(r.pose),
        Err(e) => {
            warn!("{}: registration failed: {e}", pair.name);
            None
        }
    };
    let rmse = estimate.as_ref().and_then(|p| registration_rmse(p, &gt, &geom)).map(|(r, _)| r);
    let metrics = PairMetrics {
        name: pair.name.clone(),
        n_keypoints_image: keypoints_image.len(),
        n_keypoints_cloud: keypoints_cloud.len(),
        n_matches: matches.len(),
        inlier_ratio: ir.value,
        keypoint_repeatability: kr.value,
        recall: rec,
        registration_rmse: rmse,
        registered: rmse.is_some_and(|r| r < t.tau4),
    };
    Ok((metrics, matches, estimate))
}

/// Runs the trained model on one pair.
pub fn evaluate_pair(pair: &PairData, params: &ParamSet, cfg: &Config, index: usize) -> Result<PairEvaluation> {
    let std = standardize_image(&pair.image)?;
    let fi = extract_2d(&std.image, &cfg.model.image, params)?;
    let fp = extract_3d(&pair.cloud, &cfg.model.cloud, params)?;
    let di = detection_map(&fi.raw, &fi.desc, params.get(IMAGE_GAIN), cfg.detection.source)?;
    let dc = detection_map(&fp.raw, &fp.desc, params.get(CLOUD_GAIN), cfg.detection.source)?;
    let scores_image = soft_scores(&di, &fi.layout, &cfg.detection)?;
    let scores_cloud = soft_scores(&dc, &fp.layout, &cfg.detection)?;
    let keypoints_image = detect_keypoints(&di, &scores_image, &cfg.detection)?;
    let keypoints_cloud = detect_keypoints(&dc, &scores_cloud, &cfg.detection)?;
    let (metrics, matches, estimate) = evaluate_matches(
        pair,
        &keypoints_image,
        &keypoints_cloud,
        &select_rows(&fi.desc, &keypoints_image)?,
        &select_rows(&fp.desc, &keypoints_cloud)?,
        cfg,
        derive_seed(cfg.seed, SEED_RANSAC, index as u64),
    )?;
    Ok(PairEvaluation {
        metrics,
        keypoints_image,
        keypoints_cloud,
        scores_image,
        scores_cloud,
        matches,
        estimate,
    })
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub summary: Option<MetricsSummary>,
    pub pairs: Vec<PairMetrics>,
    /// Requested pairs whose files could not be read.
    pub missing: Vec<String>,
}

/// Estimated camera-to-cloud poses as row-major 4x4 matrices.
type PoseMap = BTreeMap<String, Option<[[f64; 4]; 4]>>;

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Evaluates `names` under `data_root`, writing results into `out`. Pairs
/// that fail to load are skipped; if any were, the report is still written
/// and an [`Error::Data`] naming them is returned.
pub fn run_eval(data_root: &Path, names: &[String], params: &ParamSet, cfg: &Config, out: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let kp_dir = out.join(KEYPOINTS_DIR);
    std::fs::create_dir_all(&kp_dir).map_err(|e| Error::io(&kp_dir, e))?;
    let mut loaded = Vec::new();
    let mut missing = Vec::new();
    for (index, name) in names.iter().enumerate() {
        match load_pairs(data_root, std::slice::from_ref(name)) {
            Ok(mut v) => loaded.push((index, v.remove(0))),
            Err(e) => {
                warn!("{name}: {e}; skipped");
                missing.push(name.clone());
            }
        }
    }
    // Pairs are independent; results keep the input order.
    let evals: Vec<PairEvaluation> = loaded
        .par_iter()
        .map(|(index, pair)| evaluate_pair(pair, params, cfg, *index))
        .collect::<Result<_>>()?;
    let mut pairs = Vec::new();
    let mut poses = PoseMap::new();
    for ev in evals {
        let name = &ev.metrics.name;
        info!(
            "{name}: {} matches, IR {:.3}, RMSE {:?}",
            ev.metrics.n_matches, ev.metrics.inlier_ratio, ev.metrics.registration_rmse
        );
        write_keypoints_csv(&kp_dir.join(format!("{name}_image.csv")), &ev.keypoints_image, &ev.scores_image)?;
        write_keypoints_csv(&kp_dir.join(format!("{name}_cloud.csv")), &ev.keypoints_cloud, &ev.scores_cloud)?;
        poses.insert(name.clone(), ev.estimate.as_ref().map(RigidTransform::to_rows));
        pairs.push(ev.metrics);
    }
    let summary = if pairs.is_empty() { None } else { Some(summarize(&pairs, &cfg.metrics)?) };
    let report = EvalReport { summary, pairs, missing };
    write_pair_metrics_csv(&out.join(PAIRS_CSV), &report.pairs)?;
    write_text(&out.join(METRICS_FILE), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    write_text(&out.join(POSES_FILE), &(serde_json::to_string_pretty(&poses)? + "\n"))?;
    if !report.missing.is_empty() {
        let paths: Vec<PathBuf> = report.missing.iter().map(|n| pair_dir(data_root, n)).collect();
        return Err(Error::Data(format!(
            "{} pair(s) could not be read: {}",
            paths.len(),
            paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(report)
}

/// Evaluates a checkpoint on the test split and writes a manifest next to
/// the results. The dataset is only read.
pub fn run_eval_checkpoint(data_root: &Path, checkpoint: &Path, cfg: &Config, out: &Path) -> Result<EvalReport> {
    let index = DatasetIndex::load(data_root)?;
    let (params, _) = ParamSet::load(checkpoint)?;
    let mut manifest = RunManifest::new("eval", cfg);
    manifest.inputs.insert("checkpoint".into(), file_hash(checkpoint)?);
    for name in &index.test {
        let dir = pair_dir(data_root, name);
        if dir.is_dir() {
            manifest.inputs.insert(format!("pairs/{name}"), content_hash(&dir)?);
        }
    }
    let result = run_eval(data_root, &index.test, &params, cfg, out);
    let report = match &result {
        Ok(r) => r.clone(),
        Err(Error::Data(_)) => EvalReport::read(out)?,
        Err(_) => return result,
    };
    manifest.metrics = report.summary.clone();
    manifest.add_outputs(out, &[METRICS_FILE, PAIRS_CSV, POSES_FILE])?;
    manifest.write(out)?;
    result
}

impl EvalReport {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(METRICS_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}
