//! Dataset layout on disk:
//!
//! ```text
//! <root>/raw/<scene>/frame_<k>/{image.png, depth.bin, meta.json}
//! <root>/pairs/<scene>/{cloud.ply, image.png, depth.bin, meta.json, pairs.csv}
//! <root>/dataset.json
//! ```
//!
//! `synth` writes raw frames and then runs the same preprocessing as the
//! `preprocess` command, so every stored pair is built from data exactly as
//! it reads back from disk.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{Config, SynthConfig};
use super::derive_seed;
use super::synth::{frame_poses, generate_scene, render};
use crate::error::{Error, Result};
use crate::geometry::{CameraDoc, CameraIntrinsics};
use crate::pipeline::io::{
    quantize_cloud, read_depth_bin, read_pair_dir, read_png, write_depth_bin, write_pair_dir, write_png, PairData,
    PairMeta, DEPTH_FILE, IMAGE_FILE, META_FILE,
};
use crate::pipeline::{fuse_frames, grid_subsample, label_correspondences, PipelineConfig, PointCloud, RgbdFrame};

pub const RAW_DIR: &str = "raw";
pub const PAIRS_DIR: &str = "pairs";
pub const INDEX_FILE: &str = "dataset.json";

const SEED_SCENE: u64 = 1;
const SEED_POSES: u64 = 2;
const SEED_SUBSAMPLE: u64 = 3;
/// Attempts per scene before synthesis gives up on a usable pair.
const MAX_ATTEMPTS: u64 = 20;

/// `dataset.json`: the scene split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub train: Vec<String>,
    pub test: Vec<String>,
    /// Frame of each fragment whose image forms the pair.
    pub pair_frame: usize,
    pub points_per_scene: usize,
}

impl DatasetIndex {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(INDEX_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let mut s = serde_json::to_vec_pretty(self)?;
        s.push(b'\n');
        let path = root.join(INDEX_FILE);
        fs::write(&path, s).map_err(|e| Error::io(&path, e))
    }
}

fn frame_dir(root: &Path, scene: &str, k: usize) -> PathBuf {
    root.join(RAW_DIR).join(scene).join(format!("frame_{k}"))
}

pub fn scene_name(i: usize) -> String {
    format!("scene_{i:03}")
}

pub fn write_raw_frame(dir: &Path, frame: &RgbdFrame) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_png(&dir.join(IMAGE_FILE), &frame.color)?;
    write_depth_bin(&dir.join(DEPTH_FILE), &frame.depth)?;
    let doc = CameraDoc::new(&frame.intrinsics, Some(&frame.pose));
    let mut meta = serde_json::to_vec_pretty(&doc)?;
    meta.push(b'\n');
    let path = dir.join(META_FILE);
    fs::write(&path, meta).map_err(|e| Error::io(&path, e))
}

pub fn read_raw_frame(dir: &Path) -> Result<RgbdFrame> {
    let meta_path = dir.join(META_FILE);
    let bytes = fs::read(&meta_path).map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?;
    let doc: CameraDoc = serde_json::from_slice(&bytes).map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?;
    let intrinsics = doc.intrinsics()?;
    let pose = doc
        .transform()?
        .ok_or_else(|| Error::Data(format!("{} lacks pose T", meta_path.display())))?;
    let color = read_png(&dir.join(IMAGE_FILE))?;
    let depth = read_depth_bin(&dir.join(DEPTH_FILE), intrinsics.width, intrinsics.height)?;
    Ok(RgbdFrame {
        depth,
        color,
        pose,
        intrinsics,
    })
}

/// Frames of one raw scene, in order.
pub fn read_raw_scene(root: &Path, scene: &str) -> Result<Vec<RgbdFrame>> {
    let mut frames = Vec::new();
    while frame_dir(root, scene, frames.len()).is_dir() {
        frames.push(read_raw_frame(&frame_dir(root, scene, frames.len()))?);
    }
    if frames.is_empty() {
        return Err(Error::Data(format!("scene {scene} has no frames")));
    }
    Ok(frames)
}

/// Fuses the frames, grid-subsamples, caps the point count by a seeded
/// random subset (original order kept), and labels the `pair_frame` image
/// against the fragment.
pub fn build_pair(
    name: &str,
    frames: &[RgbdFrame],
    pair_frame: usize,
    pipeline: &PipelineConfig,
    max_points: usize,
    seed: u64,
) -> Result<PairData> {
    let frame = frames
        .get(pair_frame)
        .ok_or_else(|| Error::Data(format!("{name}: frame {pair_frame} missing")))?;
    let fused = fuse_frames(frames)?;
    let mut cloud = grid_subsample(&fused, pipeline.voxel_size)?;
    if cloud.len() > max_points {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = sample(&mut rng, cloud.len(), max_points).into_vec();
        keep.sort_unstable();
        cloud = cloud.select(&keep);
    }
    let cloud: PointCloud = quantize_cloud(&cloud);
    let labeling = label_correspondences(&frame.depth, &frame.intrinsics, &frame.pose, &cloud, pipeline);
    let meta = PairMeta {
        camera: CameraDoc::new(&frame.intrinsics, Some(&frame.pose)),
        eta: pipeline.eta,
        voxel_size: pipeline.voxel_size,
        cloud_frame: "world".into(),
        num_points: cloud.len(),
        num_correspondences: labeling.set.len(),
        usable: labeling.usable,
    };
    Ok(PairData {
        name: name.to_string(),
        cloud,
        image: frame.color.clone(),
        depth: frame.depth.clone(),
        intrinsics: frame.intrinsics,
        pose: frame.pose,
        correspondences: labeling.set,
        meta,
    })
}

fn split_names(names: Vec<String>, n_train: usize) -> (Vec<String>, Vec<String>) {
    let n_train = n_train.min(names.len());
    let test = names[n_train..].to_vec();
    let mut train = names;
    train.truncate(n_train);
    (train, test)
}

/// Builds pair directories for every raw scene under `raw_root`.
pub fn preprocess(raw_root: &Path, out_root: &Path, cfg: &Config) -> Result<DatasetIndex> {
    cfg.pipeline.validate()?;
    let raw = raw_root.join(RAW_DIR);
    let mut scenes: Vec<String> = fs::read_dir(&raw)
        .map_err(|e| Error::Data(format!("{}: {e}", raw.display())))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    scenes.sort();
    let pair_frame = cfg.pipeline.frames_per_fragment / 2;
    let mut usable = Vec::new();
    for (i, scene) in scenes.iter().enumerate() {
        let frames = read_raw_scene(raw_root, scene)?;
        let pair = build_pair(
            scene,
            &frames,
            pair_frame,
            &cfg.pipeline,
            cfg.synth.points_per_scene,
            derive_seed(cfg.seed, SEED_SUBSAMPLE, i as u64),
        )?;
        if !pair.meta.usable {
            warn!("{scene}: {} correspondences, skipped", pair.correspondences.len());
            continue;
        }
        write_pair_dir(&out_root.join(PAIRS_DIR).join(scene), &pair)?;
        usable.push(scene.clone());
    }
    if usable.is_empty() {
        return Err(Error::Data("no usable pairs".into()));
    }
    let n_train = ((usable.len() as f64 * cfg.synth.train_fraction).round() as usize).clamp(1, usable.len());
    let (train, test) = split_names(usable, n_train);
    let index = DatasetIndex {
        train,
        test,
        pair_frame,
        points_per_scene: cfg.synth.points_per_scene,
    };
    fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;
    index.save(out_root)?;
    Ok(index)
}

fn render_scene(cfg: &SynthConfig, pipeline: &PipelineConfig, seed: u64, attempt: u64) -> Result<Vec<RgbdFrame>> {
    let k = CameraIntrinsics::centered(cfg.image_size, cfg.image_size, cfg.hfov_deg.to_radians())?;
    let scene = generate_scene(cfg, derive_seed(seed, SEED_SCENE, attempt));
    frame_poses(cfg, pipeline.frames_per_fragment, derive_seed(seed, SEED_POSES, attempt))
        .iter()
        .map(|pose| {
            let (color, depth) = render(&scene, &k, pose)?;
            Ok(RgbdFrame {
                depth,
                color,
                pose: *pose,
                intrinsics: k,
            })
        })
        .collect()
}

/// Generates `cfg.synth.n_scenes` scenes under `out`, re-drawing a scene
/// until its pair has at least `min_correspondences` pairs.
pub fn synthesize(out: &Path, cfg: &Config) -> Result<DatasetIndex> {
    cfg.synth.validate()?;
    cfg.pipeline.validate()?;
    let pair_frame = cfg.pipeline.frames_per_fragment / 2;
    let mut names = Vec::new();
    for i in 0..cfg.synth.n_scenes {
        let name = scene_name(i);
        let scene_seed = derive_seed(cfg.seed, SEED_SCENE, i as u64);
        let mut done = false;
        for attempt in 0..MAX_ATTEMPTS {
            let frames = render_scene(&cfg.synth, &cfg.pipeline, scene_seed, attempt)?;
            let raw_dir = out.join(RAW_DIR).join(&name);
            if raw_dir.exists() {
                fs::remove_dir_all(&raw_dir).map_err(|e| Error::io(&raw_dir, e))?;
            }
            for (k, f) in frames.iter().enumerate() {
                write_raw_frame(&frame_dir(out, &name, k), f)?;
            }
            let frames = read_raw_scene(out, &name)?;
            let pair = build_pair(
                &name,
                &frames,
                pair_frame,
                &cfg.pipeline,
                cfg.synth.points_per_scene,
                derive_seed(cfg.seed, SEED_SUBSAMPLE, i as u64),
            )?;
            if pair.meta.usable {
                write_pair_dir(&out.join(PAIRS_DIR).join(&name), &pair)?;
                info!("{name}: {} points, {} correspondences", pair.cloud.len(), pair.correspondences.len());
                done = true;
                break;
            }
        }
        if !done {
            return Err(Error::Data(format!("{name}: no usable pair after {MAX_ATTEMPTS} attempts")));
        }
        names.push(name);
    }
    let (train, test) = split_names(names, cfg.synth.n_train());
    let index = DatasetIndex {
        train,
        test,
        pair_frame,
        points_per_scene: cfg.synth.points_per_scene,
    };
    index.save(out)?;
    Ok(index)
}

pub fn pair_dir(root: &Path, name: &str) -> PathBuf {
    root.join(PAIRS_DIR).join(name)
}

pub fn load_pairs(root: &Path, names: &[String]) -> Result<Vec<PairData>> {
    names.iter().map(|n| read_pair_dir(&pair_dir(root, n))).collect()
}

/// SHA-256 over every file below `root` (relative path and content, in
/// sorted path order), hex encoded.
pub fn content_hash(root: &Path) -> Result<String> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let p = e.map_err(|e| Error::io(dir, e))?.path();
            if p.is_dir() {
                walk(&p, out)?;
            } else {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(root, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(&f).to_string_lossy().replace('\\', "/");
        h.update((rel.len() as u64).to_le_bytes());
        h.update(rel.as_bytes());
        let bytes = fs::read(&f).map_err(|e| Error::io(&f, e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
