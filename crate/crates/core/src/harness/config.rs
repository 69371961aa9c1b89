use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detection::DetectionConfig;
use crate::error::{Error, Result};
use crate::extractors::ModelConfig;
use crate::losses::LossConfig;
use crate::metrics::MetricThresholds;
use crate::pipeline::PipelineConfig;
use crate::registration::RansacConfig;

/// Synthetic dataset generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_scenes: usize,
    /// Cap on fragment size after grid subsampling.
    pub points_per_scene: usize,
    /// Square image side (pixels).
    pub image_size: usize,
    /// Horizontal field of view (degrees).
    pub hfov_deg: f64,
    pub train_fraction: f64,
    /// Mean Voronoi cell size of the surface texture (m).
    pub texture_cell: f64,
    /// Spacing of the dense surface samples that get splatted (m).
    pub surface_spacing: f64,
    /// Camera distance range to the look-at target (m).
    pub camera_distance: [f64; 2],
    /// Camera displacement between consecutive frames (m).
    pub frame_step: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_scenes: 25,
            points_per_scene: 2000,
            image_size: 64,
            hfov_deg: 60.0,
            train_fraction: 0.8,
            texture_cell: 0.06,
            surface_spacing: 0.004,
            camera_distance: [0.75, 0.9],
            frame_step: 0.02,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::Config("image_size must be >= 32".into()));
        }
        if self.points_per_scene < 500 {
            return Err(Error::Config("points_per_scene must be >= 500".into()));
        }
        if self.n_scenes == 0 {
            return Err(Error::Config("n_scenes must be >= 1".into()));
        }
        if !(self.hfov_deg > 1.0 && self.hfov_deg < 170.0) {
            return Err(Error::Config("hfov_deg must lie in (1, 170)".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1]".into()));
        }
        if !(self.texture_cell > 0.0 && self.surface_spacing > 0.0 && self.frame_step >= 0.0) {
            return Err(Error::Config("texture_cell and surface_spacing must be positive".into()));
        }
        let [lo, hi] = self.camera_distance;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config("camera_distance must be an increasing positive range".into()));
        }
        Ok(())
    }

    pub fn n_train(&self) -> usize {
        ((self.n_scenes as f64 * self.train_fraction).round() as usize).clamp(1, self.n_scenes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Correspondences sampled per step (B).
    pub batch_corr: usize,
    /// Detector loss enabled from the second epoch only.
    pub two_stage: bool,
    pub base_lr: f64,
    /// Learning rate at the end of training relative to `base_lr`.
    pub final_lr_factor: f64,
    /// Gaussian jitter on cloud positions during training.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_corr: 128,
            two_stage: true,
            base_lr: 1e-4,
            final_lr_factor: 0.1,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_corr == 0 {
            return Err(Error::Config("epochs and batch_corr must be >= 1".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if self.final_lr_factor != 0.1 {
            return Err(Error::Config("only a 10x total decay (final_lr_factor 0.1) is supported".into()));
        }
        Ok(())
    }
}

/// Every tunable of the toolkit. Missing fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub synth: SynthConfig,
    pub pipeline: PipelineConfig,
    pub model: ModelConfig,
    pub detection: DetectionConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub metrics: MetricThresholds,
    pub ransac: RansacConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            synth: SynthConfig::default(),
            pipeline: PipelineConfig::default(),
            model: ModelConfig::default(),
            detection: DetectionConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            metrics: MetricThresholds::default(),
            ransac: RansacConfig::default(),
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.pipeline.validate()?;
        self.model.validate()?;
        self.detection.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.metrics.validate()?;
        self.ransac.validate()?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}
