//! Sequential training: one image/cloud pair per step, `B` sampled
//! correspondences inside, ADAM with a per-epoch decay.

use std::path::Path;
use std::sync::Arc;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::Config;
use super::dataset::{content_hash, load_pairs, pair_dir, DatasetIndex};
use super::manifest::RunManifest;
use super::derive_seed;
use crate::autodiff::{AdamState, Neighborhoods, ParamSet, Tape, Tensor};
use crate::detection::{detection_map_var, score_neighborhoods, soft_scores_var};
use crate::error::{Error, Result};
use crate::extractors::{
    cloud_neighborhoods, extract_2d_var, extract_3d_var, init_params, is_detector_param, Layout, CLOUD_GAIN,
    IMAGE_GAIN,
};
use crate::losses::{combined_loss, descriptor_loss, detector_loss, trace_row, BatchVars, LossBatch, NegativeMasks};
use crate::pipeline::io::PairData;
use crate::pipeline::{augment_noise, standardize_image, CorrespondenceSet, Image, PointCloud};

const SEED_ORDER: u64 = 10;
const SEED_NOISE: u64 = 11;
const SEED_BATCH: u64 = 12;

pub const TRACE_HEADER: &str = "step,epoch,loss_desc,loss_det,mean_dp,mean_dn_star";

/// One optimization step of the similarity trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub epoch: usize,
    pub loss_desc: f64,
    /// Absent while the detector is not trained.
    pub loss_det: Option<f64>,
    pub mean_dp: f64,
    pub mean_dn_star: f64,
}

impl TraceRow {
    pub fn to_csv(&self) -> String {
        let det = self.loss_det.map(|v| format!("{v:e}")).unwrap_or_default();
        format!(
            "{},{},{:e},{},{:e},{:e}",
            self.step, self.epoch, self.loss_desc, det, self.mean_dp, self.mean_dn_star
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::Data(format!("malformed trace row `{}`", line.trim()));
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
        Ok(Self {
            step: f[0].trim().parse().map_err(|_| bad())?,
            epoch: f[1].trim().parse().map_err(|_| bad())?,
            loss_desc: num(f[2])?,
            loss_det: if f[3].trim().is_empty() { None } else { Some(num(f[3])?) },
            mean_dp: num(f[4])?,
            mean_dn_star: num(f[5])?,
        })
    }
}

pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == TRACE_HEADER => {}
        _ => return Err(Error::Data(format!("{}: missing trace header", path.display()))),
    }
    lines.filter(|l| !l.trim().is_empty()).map(TraceRow::parse).collect()
}

/// Per-epoch aggregates kept in the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub skipped_pairs: usize,
    pub lr: f64,
    pub mean_loss_desc: f64,
    pub mean_loss_det: Option<f64>,
    pub mean_dp: f64,
    pub mean_dn_star: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamSet,
    pub trace: Vec<TraceRow>,
    pub epochs: Vec<EpochSummary>,
    /// Detector gains after each epoch, in parameter order.
    pub detector_snapshots: Vec<Vec<Tensor>>,
}

impl TrainOutcome {
    /// Mean `d_p - d_n*` over the trace rows of the last epoch.
    pub fn final_gap(&self) -> f64 {
        final_gap(&self.trace)
    }
}

pub fn final_gap(trace: &[TraceRow]) -> f64 {
    let Some(last) = trace.iter().map(|r| r.epoch).max() else {
        return 0.0;
    };
    let rows: Vec<&TraceRow> = trace.iter().filter(|r| r.epoch == last).collect();
    rows.iter().map(|r| r.mean_dp - r.mean_dn_star).sum::<f64>() / rows.len() as f64
}

/// A pair prepared for training.
struct Prepared {
    image: Image,
    cloud: PointCloud,
    width: usize,
    corr: CorrespondenceSet,
    score_nb_image: Arc<Neighborhoods>,
}

fn prepare(pairs: &[PairData], cfg: &Config) -> Result<Vec<Prepared>> {
    pairs
        .iter()
        .map(|p| {
            let std = standardize_image(&p.image)?;
            if std.degenerate {
                warn!("{}: constant image", p.name);
            }
            let (h, w) = (p.image.height, p.image.width);
            Ok(Prepared {
                image: std.image,
                cloud: p.cloud.clone(),
                width: w,
                corr: p.correspondences.clone(),
                score_nb_image: score_neighborhoods(&Layout::Image { height: h, width: w }, &cfg.detection)?,
            })
        })
        .collect()
}

fn detector_active(cfg: &Config, epoch: usize) -> bool {
    cfg.loss.lambda > 0.0 && (!cfg.train.two_stage || epoch >= 2)
}

fn gains(params: &ParamSet) -> Vec<Tensor> {
    params
        .iter()
        .filter(|(n, _)| is_detector_param(n))
        .map(|(_, t)| t.clone())
        .collect()
}

/// Trains from `init` (or a fresh seeded initialization).
pub fn train(pairs: &[PairData], cfg: &Config, init: Option<ParamSet>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Data("no training pairs".into()));
    }
    let prepared = prepare(pairs, cfg)?;
    let mut params = match init {
        Some(p) => p,
        None => init_params(&cfg.model, cfg.seed)?,
    };
    let mut adam = AdamState::new(&params, cfg.train.base_lr, cfg.train.epochs)?;
    let b = cfg.train.batch_corr;
    let mut trace = Vec::new();
    let mut epochs = Vec::new();
    let mut snapshots = Vec::new();
    let mut step = 0usize;
    for epoch in 1..=cfg.train.epochs {
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SEED_ORDER, epoch as u64)));
        let lr = adam.lr();
        let first_row = trace.len();
        let mut skipped = 0;
        for &pi in &order {
            let pair = &prepared[pi];
            let stream = (epoch as u64) << 32 | pi as u64;
            let cloud = if cfg.train.augment {
                augment_noise(&pair.cloud, cfg.pipeline.noise_sigma, derive_seed(cfg.seed, SEED_NOISE, stream))?
            } else {
                pair.cloud.clone()
            };
            let Some(batch) = LossBatch::sample(&pair.corr, pair.width, &cloud.points, b, derive_seed(cfg.seed, SEED_BATCH, stream))? else {
                warn!("pair {pi}: fewer than {b} correspondences, skipped");
                skipped += 1;
                continue;
            };
            step += 1;
            let tape = Tape::new();
            let bound = params.bind(&tape, true)?;
            let fi = extract_2d_var(&tape, &pair.image, &cfg.model.image, &bound)?;
            let nbs = cloud_neighborhoods(&cloud.points, &cfg.model.cloud.radii)?;
            let fp = extract_3d_var(&tape, &cloud, &cfg.model.cloud, &bound, &nbs)?;
            let bv = BatchVars::gather(fi.desc, fp.desc, &batch)?;
            let masks = NegativeMasks::new(&batch, &cfg.loss.radii);
            let desc = descriptor_loss(&bv, &masks, &cfg.loss)?;
            let det = if detector_active(cfg, epoch) {
                let di = detection_map_var(&fi, Some(bound.var(IMAGE_GAIN)?), cfg.detection.source)?;
                let si = soft_scores_var(di, &pair.score_nb_image)?;
                let dc = detection_map_var(&fp, Some(bound.var(CLOUD_GAIN)?), cfg.detection.source)?;
                let nb_c = score_neighborhoods(&fp.layout, &cfg.detection)?;
                let sc = soft_scores_var(dc, &nb_c)?;
                Some(detector_loss(&bv, si.gather_rows(&batch.pixels)?, sc.gather_rows(&batch.points)?)?)
            } else {
                None
            };
            let total = match det {
                Some(d) => combined_loss(desc.value, d, cfg.loss.lambda)?,
                None => desc.value,
            };
            let loss = total.item();
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    step,
                    reason: format!("loss is {loss}"),
                });
            }
            let sim = trace_row(&bv, &masks)?;
            let row = TraceRow {
                step,
                epoch,
                loss_desc: desc.value.item(),
                loss_det: det.map(|d| d.item()),
                mean_dp: sim.mean_dp,
                mean_dn_star: sim.mean_dn_star,
            };
            let mut grads = tape.backward(total)?;
            let g = bound.collect_grads(&mut grads);
            if g.iter().flatten().any(|t| !t.all_finite()) {
                return Err(Error::Diverged {
                    step,
                    reason: "non-finite gradient".into(),
                });
            }
            adam.step(&mut params, &g)?;
            if step % 10 == 0 {
                info!(
                    "epoch {epoch} step {step}: loss {:.4} dp {:.3} dn* {:.3}",
                    loss, row.mean_dp, row.mean_dn_star
                );
            }
            trace.push(row);
        }
        adam.end_epoch();
        let rows = &trace[first_row..];
        let n = rows.len().max(1) as f64;
        let dets: Vec<f64> = rows.iter().filter_map(|r| r.loss_det).collect();
        epochs.push(EpochSummary {
            epoch,
            steps: rows.len(),
            skipped_pairs: skipped,
            lr,
            mean_loss_desc: rows.iter().map(|r| r.loss_desc).sum::<f64>() / n,
            mean_loss_det: (!dets.is_empty()).then(|| dets.iter().sum::<f64>() / dets.len() as f64),
            mean_dp: rows.iter().map(|r| r.mean_dp).sum::<f64>() / n,
            mean_dn_star: rows.iter().map(|r| r.mean_dn_star).sum::<f64>() / n,
        });
        snapshots.push(gains(&params));
        info!(
            "epoch {epoch} done: dp {:.3} dn* {:.3}",
            epochs[epoch - 1].mean_dp,
            epochs[epoch - 1].mean_dn_star
        );
    }
    if step == 0 {
        return Err(Error::Data("every training pair was skipped".into()));
    }
    Ok(TrainOutcome {
        params,
        trace,
        epochs,
        detector_snapshots: snapshots,
    })
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRACE_FILE: &str = "trace.csv";
pub const CONFIG_FILE: &str = "config.json";

/// Trains on the training split under `data_root` and writes checkpoint,
/// trace, config snapshot and manifest into `out`.
pub fn run_train(data_root: &Path, cfg: &Config, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let index = DatasetIndex::load(data_root)?;
    let pairs = load_pairs(data_root, &index.train)?;
    let mut manifest = RunManifest::new("train", cfg);
    for name in &index.train {
        manifest
            .inputs
            .insert(format!("pairs/{name}"), content_hash(&pair_dir(data_root, name))?);
    }
    let outcome = train(&pairs, cfg, None)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let meta = serde_json::json!({ "epochs": cfg.train.epochs, "seed": cfg.seed, "steps": outcome.trace.len() });
    outcome.params.save(&out.join(CHECKPOINT_FILE), meta)?;
    let write = |name: &str, text: String| {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write(TRACE_FILE, trace_to_csv(&outcome.trace))?;
    write(CONFIG_FILE, cfg.to_json())?;
    manifest.epochs = outcome.epochs.clone();
    manifest.add_outputs(out, &[CHECKPOINT_FILE, TRACE_FILE, CONFIG_FILE])?;
    manifest.write(out)?;
    Ok(outcome)
}
