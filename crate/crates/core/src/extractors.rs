//! Dense 2D and 3D feature extractors.
//!
//! The image network is nine same-padded 3×3 dilated convolutions; the
//! point network is a two-stage radius-aggregation network followed by a
//! linear head. Both emit one `C`-dimensional raw activation row per
//! pixel or point plus its L2-normalized descriptor.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, Neighborhoods, ParamSet, Tape, Tensor, Var, L2_GUARD};
use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::pipeline::{Image, KdTree, PointCloud};

pub const DILATIONS: [usize; 9] = [1, 1, 2, 2, 4, 4, 4, 8, 16];
/// Number of leading layers followed by a leaky ReLU.
pub const ACTIVATED_LAYERS: usize = 6;
/// Inputs with a larger absolute mean are flagged as not standardized.
pub const STANDARDIZED_MEAN_TOL: f64 = 0.1;

pub const IMAGE_GAIN: &str = "img.det.gain";
pub const CLOUD_GAIN: &str = "pcd.det.gain";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Extractor2DConfig {
    pub channels: Vec<usize>,
    pub dilations: Vec<usize>,
    pub descriptor_dim: usize,
    pub leaky_slope: f64,
}

impl Default for Extractor2DConfig {
    fn default() -> Self {
        Self {
            channels: vec![8, 8, 16, 16, 32, 32, 32, 32, 32],
            dilations: DILATIONS.to_vec(),
            descriptor_dim: 32,
            leaky_slope: 0.1,
        }
    }
}

impl Extractor2DConfig {
    /// Reduced widths with the same layer and dilation structure.
    pub fn with_widths(channels: [usize; 9]) -> Self {
        Self {
            channels: channels.to_vec(),
            descriptor_dim: channels[8],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 9 || self.dilations != DILATIONS {
            return Err(Error::Config(
                "image extractor needs 9 layers with dilations (1,1,2,2,4,4,4,8,16)".into(),
            ));
        }
        if self.channels.iter().any(|&c| c == 0) || self.channels[8] != self.descriptor_dim {
            return Err(Error::Config(
                "image extractor widths must be >= 1 and end at descriptor_dim".into(),
            ));
        }
        if !(self.leaky_slope >= 0.0) {
            return Err(Error::Config("leaky_slope must be >= 0".into()));
        }
        Ok(())
    }

    /// Farthest input offset (per axis) that can influence an output pixel.
    pub fn receptive_radius(&self) -> usize {
        self.dilations.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Extractor3DConfig {
    pub radii: Vec<f64>,
    pub widths: Vec<usize>,
    pub descriptor_dim: usize,
    pub leaky_slope: f64,
}

impl Default for Extractor3DConfig {
    fn default() -> Self {
        Self {
            radii: vec![0.04, 0.08],
            widths: vec![16, 32],
            descriptor_dim: 32,
            leaky_slope: 0.1,
        }
    }
}

impl Extractor3DConfig {
    pub fn validate(&self) -> Result<()> {
        if self.radii.is_empty() || self.radii.len() != self.widths.len() {
            return Err(Error::Config("point extractor needs one width per radius".into()));
        }
        if self.radii.iter().any(|r| !(*r > 0.0)) || self.radii.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("point extractor radii must be positive and increasing".into()));
        }
        if self.widths.iter().any(|&w| w == 0) || self.descriptor_dim == 0 {
            return Err(Error::Config("point extractor widths must be >= 1".into()));
        }
        Ok(())
    }
}

/// Both extractors; the descriptor dimension must agree across modalities.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image: Extractor2DConfig,
    pub cloud: Extractor3DConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        self.cloud.validate()?;
        if self.image.descriptor_dim != self.cloud.descriptor_dim {
            return Err(Error::Config("descriptor_dim differs between modalities".into()));
        }
        Ok(())
    }

    pub fn descriptor_dim(&self) -> usize {
        self.image.descriptor_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layout {
    Image { height: usize, width: usize },
    Cloud { points: Vec<Point3> },
}

impl Layout {
    pub fn len(&self) -> usize {
        match self {
            Layout::Image { height, width } => height * width,
            Layout::Cloud { points } => points.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Extractor outputs recorded on a tape. `raw` and `desc` are `[T, C]`.
#[derive(Debug, Clone)]
pub struct FeatureVars<'t> {
    pub raw: Var<'t>,
    pub desc: Var<'t>,
    pub layout: Layout,
}

/// Materialized extractor outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFeatures {
    pub raw: Tensor,
    pub desc: Tensor,
    pub layout: Layout,
    /// Some raw row had norm at or below the normalization guard.
    pub degenerate: bool,
    /// The input image mean exceeded [`STANDARDIZED_MEAN_TOL`].
    pub unstandardized: bool,
}

impl DenseFeatures {
    fn from_vars(v: &FeatureVars<'_>, unstandardized: bool) -> Self {
        let raw = (*v.raw.value()).clone();
        let (n, _) = raw.dims2().unwrap_or((0, 0));
        let degenerate = (0..n).any(|r| {
            raw.row(r).iter().map(|x| x * x).sum::<f64>().sqrt() <= L2_GUARD
        });
        Self {
            desc: (*v.desc.value()).clone(),
            raw,
            layout: v.layout.clone(),
            degenerate,
            unstandardized,
        }
    }

    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.raw.shape().get(1).copied().unwrap_or(0)
    }
}

fn glorot(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

pub fn init_image_params(cfg: &Extractor2DConfig, rng: &mut ChaCha8Rng) -> Result<ParamSet> {
    cfg.validate()?;
    let mut p = ParamSet::new();
    let mut cin = 3;
    for (i, &cout) in cfg.channels.iter().enumerate() {
        p.insert(
            format!("img.conv{i}.weight"),
            glorot(rng, vec![3, 3, cin, cout], 9 * cin, 9 * cout),
        )?;
        p.insert(format!("img.conv{i}.bias"), Tensor::zeros(vec![cout]))?;
        cin = cout;
    }
    p.insert(IMAGE_GAIN, Tensor::full(vec![cfg.descriptor_dim], 1.0))?;
    Ok(p)
}

pub fn init_cloud_params(cfg: &Extractor3DConfig, rng: &mut ChaCha8Rng) -> Result<ParamSet> {
    cfg.validate()?;
    let mut p = ParamSet::new();
    let mut cin = 4;
    for (i, &w) in cfg.widths.iter().enumerate() {
        p.insert(format!("pcd.stage{i}.lin.weight"), glorot(rng, vec![cin, w], cin, w))?;
        p.insert(format!("pcd.stage{i}.lin.bias"), Tensor::zeros(vec![w]))?;
        p.insert(format!("pcd.stage{i}.offset"), glorot(rng, vec![3, w], 3, w))?;
        cin = 2 * w;
    }
    let c = cfg.descriptor_dim;
    p.insert("pcd.head.weight", glorot(rng, vec![cin, c], cin, c))?;
    p.insert("pcd.head.bias", Tensor::zeros(vec![c]))?;
    p.insert(CLOUD_GAIN, Tensor::full(vec![c], 1.0))?;
    Ok(p)
}

/// Image then cloud parameters, seeded.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = init_image_params(&cfg.image, &mut rng)?;
    p.extend(init_cloud_params(&cfg.cloud, &mut rng)?)?;
    Ok(p)
}

pub fn is_detector_param(name: &str) -> bool {
    name == IMAGE_GAIN || name == CLOUD_GAIN
}

/// Records the image network on `tape`. `image` is `H×W×3`.
pub fn extract_2d_var<'t>(
    tape: &'t Tape,
    image: &Image,
    cfg: &Extractor2DConfig,
    params: &BoundParams<'t>,
) -> Result<FeatureVars<'t>> {
    cfg.validate()?;
    if image.channels != 3 || image.data.is_empty() {
        return Err(Error::invalid("image extractor expects a non-empty 3-channel image"));
    }
    let (h, w) = (image.height, image.width);
    let mut x = tape.constant(Tensor::new(vec![h, w, 3], image.data.clone())?)?;
    for (i, &d) in cfg.dilations.iter().enumerate() {
        let k = params.var(&format!("img.conv{i}.weight"))?;
        let b = params.var(&format!("img.conv{i}.bias"))?;
        x = x.conv2d(k, Some(b), d)?;
        if i < ACTIVATED_LAYERS {
            x = x.leaky_relu(cfg.leaky_slope)?;
        }
    }
    let raw = x.reshape(vec![h * w, cfg.descriptor_dim])?;
    Ok(FeatureVars {
        raw,
        desc: raw.l2_normalize()?,
        layout: Layout::Image { height: h, width: w },
    })
}

pub fn extract_2d(image: &Image, cfg: &Extractor2DConfig, params: &ParamSet) -> Result<DenseFeatures> {
    let unstandardized = image.mean().abs() > STANDARDIZED_MEAN_TOL;
    if unstandardized {
        log::warn!("image extractor input has mean {:.3}; expected a standardized image", image.mean());
    }
    let tape = Tape::new();
    let bound = params.bind(&tape, false)?;
    let v = extract_2d_var(&tape, image, cfg, &bound)?;
    Ok(DenseFeatures::from_vars(&v, unstandardized))
}

/// Radius neighborhoods (self included) for each aggregation stage.
pub fn cloud_neighborhoods(points: &[Point3], radii: &[f64]) -> Result<Vec<Arc<Neighborhoods>>> {
    let tree = KdTree::build(points);
    radii
        .iter()
        .map(|&r| {
            let lists: Vec<Vec<usize>> = points.iter().map(|p| tree.within_radius(p, r)).collect();
            Neighborhoods::from_lists(&lists, points.len()).map(Arc::new)
        })
        .collect()
}

/// Records the point network on `tape`. `neighborhoods` must come from
/// [`cloud_neighborhoods`] over the same points and radii.
pub fn extract_3d_var<'t>(
    tape: &'t Tape,
    cloud: &PointCloud,
    cfg: &Extractor3DConfig,
    params: &BoundParams<'t>,
    neighborhoods: &[Arc<Neighborhoods>],
) -> Result<FeatureVars<'t>> {
    cfg.validate()?;
    let z = cloud.len();
    if z == 0 {
        return Err(Error::invalid("point extractor needs a non-empty cloud"));
    }
    if neighborhoods.len() != cfg.radii.len() || neighborhoods.iter().any(|n| n.len() != z) {
        return Err(Error::invalid("neighborhoods do not match the cloud and radii"));
    }
    let mut input = Vec::with_capacity(z * 4);
    for i in 0..z {
        input.extend_from_slice(&cloud.color(i));
        input.push(1.0);
    }
    let mut f = tape.constant(Tensor::matrix(z, 4, input)?)?;
    for (s, (&r, nb)) in cfg.radii.iter().zip(neighborhoods).enumerate() {
        let scaled: Vec<f64> = cloud
            .points
            .iter()
            .flat_map(|p| [p.x / r, p.y / r, p.z / r])
            .collect();
        let pos = tape.constant(Tensor::matrix(z, 3, scaled)?)?;
        let q = pos.matmul(params.var(&format!("pcd.stage{s}.offset"))?)?;
        let g = f
            .matmul(params.var(&format!("pcd.stage{s}.lin.weight"))?)?
            .add(params.var(&format!("pcd.stage{s}.lin.bias"))?)?
            .add(q)?;
        let mean = g.neighborhood_mean(nb)?.sub(q)?;
        let max = g.neighborhood_max(nb)?.sub(q)?;
        f = mean.concat_cols(max)?.leaky_relu(cfg.leaky_slope)?;
    }
    let raw = f
        .matmul(params.var("pcd.head.weight")?)?
        .add(params.var("pcd.head.bias")?)?;
    Ok(FeatureVars {
        raw,
        desc: raw.l2_normalize()?,
        layout: Layout::Cloud {
            points: cloud.points.clone(),
        },
    })
}

pub fn extract_3d(cloud: &PointCloud, cfg: &Extractor3DConfig, params: &ParamSet) -> Result<DenseFeatures> {
    if cloud.is_empty() {
        return Err(Error::invalid("point extractor needs a non-empty cloud"));
    }
    let nbs = cloud_neighborhoods(&cloud.points, &cfg.radii)?;
    let tape = Tape::new();
    let bound = params.bind(&tape, false)?;
    let v = extract_3d_var(&tape, cloud, cfg, &bound, &nbs)?;
    Ok(DenseFeatures::from_vars(&v, false))
}
