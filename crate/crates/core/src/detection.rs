//! Keypoint scoring and selection on dense detection maps `D` (`[T, C]`).

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Neighborhoods, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::extractors::{FeatureVars, Layout};
use crate::pipeline::KdTree;

/// Which activations feed the detection map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapSource {
    /// Pre-normalization activations.
    #[default]
    Raw,
    /// Unit-norm descriptors.
    Normalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionConfig {
    /// Half-size of the square image window.
    pub window_radius: usize,
    /// Ball radius for clouds (meters).
    pub cloud_radius: f64,
    pub edge_ratio: f64,
    pub top_k: usize,
    pub source: MapSource,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            window_radius: 2,
            cloud_radius: 0.03,
            edge_ratio: 10.0,
            top_k: 1000,
            source: MapSource::Raw,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_radius < 1 || !(self.cloud_radius > 0.0) || !(self.edge_ratio > 1.0) || self.top_k < 1 {
            return Err(Error::Config(
                "detection needs window_radius >= 1, cloud_radius > 0, edge_ratio > 1, top_k >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Normalized soft detection scores, one per location.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub scores: Vec<f64>,
    pub layout: Layout,
}

/// Neighborhoods used for the spatial mean in α: the clipped window (or
/// radius ball) around each location, the location itself included.
pub fn score_neighborhoods(layout: &Layout, cfg: &DetectionConfig) -> Result<Arc<Neighborhoods>> {
    match layout {
        Layout::Image { height, width } => Ok(Arc::new(Neighborhoods::image_window(
            *height,
            *width,
            cfg.window_radius,
            true,
        ))),
        Layout::Cloud { points } => {
            let tree = KdTree::build(points);
            let lists: Vec<Vec<usize>> = points
                .iter()
                .map(|p| tree.within_radius(p, cfg.cloud_radius))
                .collect();
            Ok(Arc::new(Neighborhoods::from_lists(&lists, points.len())?))
        }
    }
}

/// `D = g ⊙ base`, where `base` is the raw map or the descriptors.
pub fn detection_map_var<'t>(f: &FeatureVars<'t>, gain: Option<Var<'t>>, source: MapSource) -> Result<Var<'t>> {
    let base = match source {
        MapSource::Raw => f.raw,
        MapSource::Normalized => f.desc,
    };
    match gain {
        Some(g) => base.mul(g),
        None => Ok(base),
    }
}

pub fn detection_map(raw: &Tensor, desc: &Tensor, gain: Option<&Tensor>, source: MapSource) -> Result<Tensor> {
    let base = match source {
        MapSource::Raw => raw,
        MapSource::Normalized => desc,
    };
    let (t, c) = base.dims2()?;
    let Some(g) = gain else { return Ok(base.clone()) };
    if g.len() != c {
        return Err(Error::invalid("detector gain length differs from channel count"));
    }
    let mut out = base.clone();
    for r in 0..t {
        for (v, gv) in out.data_mut()[r * c..(r + 1) * c].iter_mut().zip(g.data()) {
            *v *= gv;
        }
    }
    Ok(out)
}

/// Differentiable scores `S` (`[T]`) from a detection map `[T, C]`.
pub fn soft_scores_var<'t>(d: Var<'t>, nb: &Arc<Neighborhoods>) -> Result<Var<'t>> {
    let shape = d.shape();
    if shape.len() != 2 || shape[0] == 0 || shape[1] == 0 {
        return Err(Error::invalid("soft scores need a non-empty [T, C] map"));
    }
    let t = shape[0];
    let alpha = d.sub(d.neighborhood_mean(nb)?)?.softplus()?;
    let beta = d.sub(d.mean_axis(1)?)?.softplus()?;
    let gamma = alpha.mul(beta)?.max_axis(1)?.reshape(vec![t])?;
    let total = gamma.sum()?;
    if !(total.item() > 0.0) {
        return d.tape().constant(Tensor::full(vec![t], 1.0 / t as f64));
    }
    gamma.div(total)
}

pub fn soft_scores(d: &Tensor, layout: &Layout, cfg: &DetectionConfig) -> Result<ScoreMap> {
    let (t, _) = d.dims2()?;
    if t != layout.len() {
        return Err(Error::invalid("detection map rows differ from layout size"));
    }
    let nb = score_neighborhoods(layout, cfg)?;
    let tape = Tape::new();
    let dv = tape.constant(d.clone())?;
    let s = soft_scores_var(dv, &nb)?;
    Ok(ScoreMap {
        scores: s.value().data().to_vec(),
        layout: layout.clone(),
    })
}

/// Depth-wise argmax channel per location (lowest index on ties).
pub fn argmax_channels(d: &Tensor) -> Result<Vec<usize>> {
    let (t, c) = d.dims2()?;
    if c == 0 {
        return Err(Error::invalid("detection map has no channels"));
    }
    Ok((0..t)
        .map(|r| {
            let row = d.row(r);
            (1..c).fold(0, |best, k| if row[k] > row[best] { k } else { best })
        })
        .collect())
}

/// A location is a keypoint when its argmax channel is strictly larger
/// there than at every other location of its neighborhood.
pub fn hard_detect(d: &Tensor, layout: &Layout, cfg: &DetectionConfig) -> Result<Vec<bool>> {
    let (t, c) = d.dims2()?;
    if t != layout.len() {
        return Err(Error::invalid("detection map rows differ from layout size"));
    }
    let arg = argmax_channels(d)?;
    let data = d.data();
    let strict_max = |i: usize, others: &[usize]| {
        let v = data[i * c + arg[i]];
        others.iter().all(|&j| j == i || data[j * c + arg[i]] < v)
    };
    match layout {
        Layout::Image { height, width } => {
            let nb = Neighborhoods::image_window(*height, *width, cfg.window_radius, false);
            Ok((0..t).map(|i| strict_max(i, nb.get(i))).collect())
        }
        Layout::Cloud { points } => {
            let tree = KdTree::build(points);
            Ok((0..t)
                .map(|i| strict_max(i, &tree.within_radius(&points[i], cfg.cloud_radius)))
                .collect())
        }
    }
}

/// Finite-difference Hessian `(dxx, dyy, dxy)` of a row-major grid at
/// `(x, y)`, with indices clamped at the borders.
pub fn grid_hessian(s: &[f64], height: usize, width: usize, x: usize, y: usize) -> (f64, f64, f64) {
    let at = |xx: isize, yy: isize| {
        let xx = xx.clamp(0, width as isize - 1) as usize;
        let yy = yy.clamp(0, height as isize - 1) as usize;
        s[yy * width + xx]
    };
    let (x, y) = (x as isize, y as isize);
    let c = at(x, y);
    let dxx = at(x + 1, y) - 2.0 * c + at(x - 1, y);
    let dyy = at(x, y + 1) - 2.0 * c + at(x, y - 1);
    let dxy = (at(x + 1, y + 1) - at(x - 1, y + 1) - at(x + 1, y - 1) + at(x - 1, y - 1)) / 4.0;
    (dxx, dyy, dxy)
}

/// Drops masked locations whose score surface is edge-like: non-positive
/// Hessian determinant or `tr²/det ≥ (r+1)²/r`.
pub fn edge_eliminate(scores: &[f64], height: usize, width: usize, mask: &[bool], ratio: f64) -> Result<Vec<bool>> {
    if scores.len() != height * width || mask.len() != scores.len() {
        return Err(Error::invalid("edge elimination needs a full score grid and mask"));
    }
    let limit = (ratio + 1.0).powi(2) / ratio;
    Ok(mask
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            if !m {
                return false;
            }
            let (dxx, dyy, dxy) = grid_hessian(scores, height, width, i % width, i / width);
            let det = dxx * dyy - dxy * dxy;
            let tr = dxx + dyy;
            det > 0.0 && tr * tr / det < limit
        })
        .collect())
}

/// Masked locations ranked by score (descending, lower index first on
/// ties), truncated to `k`.
pub fn top_k(scores: &[f64], mask: &[bool], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| mask[i]).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Test-time keypoints: hard detection, edge elimination on images, then
/// top-k by soft score.
pub fn detect_keypoints(d: &Tensor, scores: &ScoreMap, cfg: &DetectionConfig) -> Result<Vec<usize>> {
    let mut mask = hard_detect(d, &scores.layout, cfg)?;
    if let Layout::Image { height, width } = scores.layout {
        mask = edge_eliminate(&scores.scores, height, width, &mask, cfg.edge_ratio)?;
    }
    Ok(top_k(&scores.scores, &mask, cfg.top_k))
}

/// `index,u,v_or_point_id,score`: `index` is the rank; images give the
/// pixel column and row, clouds give `u = -1` and the point id.
pub fn write_keypoints_csv(path: &Path, keypoints: &[usize], scores: &ScoreMap) -> Result<()> {
    let mut out = String::from("index,u,v_or_point_id,score\n");
    for (rank, &t) in keypoints.iter().enumerate() {
        let (u, v) = match scores.layout {
            Layout::Image { width, .. } => ((t % width) as i64, t / width),
            Layout::Cloud { .. } => (-1, t),
        };
        out.push_str(&format!("{rank},{u},{v},{:.12e}\n", scores.scores[t]));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
