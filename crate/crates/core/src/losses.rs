//! Descriptor and detector losses over a batch of sampled correspondences.
//!
//! `sim[i][j] = d_{X_i} · d_{Y_j}`; the diagonal holds the positive
//! similarities `d_p`. An off-diagonal entry is a negative for the pixel
//! anchor `X_i` when `Y_j` lies outside the point-side safe radius of
//! `Y_i`, and for the point anchor `Y_j` when `X_i` lies outside the
//! pixel-side safe radius of `X_j`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{Pixel, Point3};
use crate::pipeline::CorrespondenceSet;

/// Largest argument passed to `exp` inside the descriptor losses.
pub const EXP_CLAMP: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CircleParams {
    /// Relaxation margin.
    pub m: f64,
    /// Scale factor ζ.
    pub zeta: f64,
}

impl Default for CircleParams {
    fn default() -> Self {
        Self { m: 0.2, zeta: 10.0 }
    }
}

impl CircleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.m > 0.0 && self.m < 1.0) || !(self.zeta > 0.0) {
            return Err(Error::Config("circle loss needs 0 < m < 1 and zeta > 0".into()));
        }
        Ok(())
    }

    pub fn o_p(&self) -> f64 {
        1.0 + self.m
    }

    pub fn o_n(&self) -> f64 {
        -self.m
    }

    pub fn delta_p(&self) -> f64 {
        1.0 - self.m
    }

    pub fn delta_n(&self) -> f64 {
        self.m
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarginParams {
    /// Triplet margin `M`.
    pub triplet: f64,
    /// Contrastive positive margin `M_p`.
    pub positive: f64,
    /// Contrastive negative margin `M_n`.
    pub negative: f64,
}

impl Default for MarginParams {
    fn default() -> Self {
        Self {
            triplet: 0.2,
            positive: 0.9,
            negative: 0.2,
        }
    }
}

impl MarginParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.triplet > 0.0) || !(self.positive > self.negative) {
            return Err(Error::Config("margins need M > 0 and M_p > M_n".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SafeRadii {
    /// Pixel-side radius `R_I` (pixels).
    pub image: f64,
    /// Point-side radius `R_P` (meters).
    pub cloud: f64,
}

impl Default for SafeRadii {
    fn default() -> Self {
        Self {
            image: 12.0,
            cloud: 0.015,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptorLossKind {
    #[default]
    Circle,
    Triplet,
    Contrastive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CircleForm {
    /// Weights inside the exponent, one summed softplus.
    #[default]
    AsWritten,
    /// Softplus of the sum of the positive and negative log-sum-exps.
    Canonical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletForm {
    /// `[M + d_n - d_p]_+`.
    #[default]
    Standard,
    /// `[d_p - d_n - M]_+`.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub descriptor: DescriptorLossKind,
    pub circle: CircleParams,
    pub circle_form: CircleForm,
    /// Keep the safe-radius exclusion for circle-loss negatives.
    pub circle_safe_radius: bool,
    pub margins: MarginParams,
    pub triplet_form: TripletForm,
    pub radii: SafeRadii,
    /// Balance factor λ.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            descriptor: DescriptorLossKind::Circle,
            circle: CircleParams::default(),
            circle_form: CircleForm::AsWritten,
            circle_safe_radius: true,
            margins: MarginParams::default(),
            triplet_form: TripletForm::Standard,
            radii: SafeRadii::default(),
            lambda: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        self.circle.validate()?;
        self.margins.validate()?;
        if !(self.radii.image >= 0.0 && self.radii.cloud >= 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::Config("safe radii and lambda must be >= 0".into()));
        }
        Ok(())
    }
}

/// Sampled correspondences with the coordinates needed for negative mining.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBatch {
    pub pixels: Vec<usize>,
    pub points: Vec<usize>,
    pub pixel_coords: Vec<Pixel>,
    pub point_coords: Vec<Point3>,
}

impl LossBatch {
    pub fn from_pairs(pairs: &[(usize, usize)], image_width: usize, cloud: &[Point3]) -> Result<Self> {
        if image_width == 0 {
            return Err(Error::invalid("image width must be positive"));
        }
        if let Some(&(_, j)) = pairs.iter().find(|(_, j)| *j >= cloud.len()) {
            return Err(Error::invalid(format!("point index {j} out of range")));
        }
        Ok(Self {
            pixels: pairs.iter().map(|p| p.0).collect(),
            points: pairs.iter().map(|p| p.1).collect(),
            pixel_coords: pairs.iter().map(|p| Pixel::from_index(p.0, image_width)).collect(),
            point_coords: pairs.iter().map(|p| cloud[p.1]).collect(),
        })
    }

    /// Uniform sample of `b` correspondences without replacement, in
    /// shuffled order. `None` when the set holds fewer than `b` pairs.
    pub fn sample(
        corr: &CorrespondenceSet,
        image_width: usize,
        cloud: &[Point3],
        b: usize,
        seed: u64,
    ) -> Result<Option<Self>> {
        if b == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if corr.len() < b {
            return Ok(None);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..corr.len()).collect();
        let (chosen, _) = order.partial_shuffle(&mut rng, b);
        let pairs: Vec<(usize, usize)> = chosen
            .iter()
            .map(|&k| (corr.pairs[k].pixel, corr.pairs[k].point))
            .collect();
        Self::from_pairs(&pairs, image_width, cloud).map(Some)
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// Admissible negatives, row-major `B × B`.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeMasks {
    pub b: usize,
    /// `[i][j]`: `Y_j` is a negative for the pixel anchor `X_i` (entry `sim[i][j]`).
    pub pixel_anchor: Vec<bool>,
    /// `[i][j]`: `X_j` is a negative for the point anchor `Y_i` (entry `sim[j][i]`).
    pub point_anchor: Vec<bool>,
}

impl NegativeMasks {
    pub fn new(batch: &LossBatch, radii: &SafeRadii) -> Self {
        let b = batch.len();
        let mut pixel_anchor = vec![false; b * b];
        let mut point_anchor = vec![false; b * b];
        for i in 0..b {
            for j in 0..b {
                if i == j {
                    continue;
                }
                pixel_anchor[i * b + j] =
                    (batch.point_coords[j] - batch.point_coords[i]).norm() > radii.cloud;
                point_anchor[i * b + j] = batch.pixel_coords[j].distance(&batch.pixel_coords[i]) > radii.image;
            }
        }
        Self {
            b,
            pixel_anchor,
            point_anchor,
        }
    }

    /// Every off-diagonal entry admissible in both directions.
    pub fn all_off_diagonal(b: usize) -> Self {
        let m: Vec<bool> = (0..b * b).map(|k| k / b != k % b).collect();
        Self {
            b,
            pixel_anchor: m.clone(),
            point_anchor: m,
        }
    }

    /// How many times `sim[i][j]` enters the loss as a negative (0, 1 or 2).
    pub fn pair_weights(&self) -> Vec<f64> {
        let b = self.b;
        (0..b * b)
            .map(|k| {
                let (i, j) = (k / b, k % b);
                self.pixel_anchor[k] as u8 as f64 + self.point_anchor[j * b + i] as u8 as f64
            })
            .collect()
    }

    /// Row `i` masks `[sim[i][·] | sim[·][i]]`, matching `[sim | simᵀ]`.
    pub fn anchor_rows(&self) -> Vec<bool> {
        let b = self.b;
        let mut out = Vec::with_capacity(2 * b * b);
        for i in 0..b {
            out.extend_from_slice(&self.pixel_anchor[i * b..(i + 1) * b]);
            out.extend_from_slice(&self.point_anchor[i * b..(i + 1) * b]);
        }
        out
    }

    /// Anchors with no admissible negative in either direction.
    pub fn empty_anchors(&self) -> usize {
        let rows = self.anchor_rows();
        rows.chunks(2 * self.b.max(1)).filter(|r| !r.iter().any(|&m| m)).count()
    }
}

/// Batch descriptors and similarities recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BatchVars<'t> {
    /// `[B, C]` pixel descriptors.
    pub dx: Var<'t>,
    /// `[B, C]` point descriptors.
    pub dy: Var<'t>,
    /// `[B, B]`.
    pub sim: Var<'t>,
    /// `[B]`.
    pub dp: Var<'t>,
}

impl<'t> BatchVars<'t> {
    pub fn new(dx: Var<'t>, dy: Var<'t>) -> Result<Self> {
        let (sx, sy) = (dx.shape(), dy.shape());
        if sx.len() != 2 || sx != sy || sx[0] == 0 {
            return Err(Error::invalid("batch descriptors must both be non-empty [B, C]"));
        }
        let sim = dx.matmul(dy.transpose()?)?;
        Ok(Self {
            dx,
            dy,
            sim,
            dp: sim.diag()?,
        })
    }

    /// Gathers batch rows from full descriptor fields.
    pub fn gather(desc_image: Var<'t>, desc_cloud: Var<'t>, batch: &LossBatch) -> Result<Self> {
        Self::new(desc_image.gather_rows(&batch.pixels)?, desc_cloud.gather_rows(&batch.points)?)
    }

    pub fn len(&self) -> usize {
        self.dx.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn tape(&self) -> &'t Tape {
        self.dx.tape()
    }

    /// Per-anchor hardest admissible negative over both directions, and
    /// whether the anchor had any.
    pub fn hardest_negatives(&self, masks: &NegativeMasks) -> Result<(Var<'t>, Vec<bool>)> {
        check_masks(self, masks)?;
        self.sim.concat_cols(self.sim.transpose()?)?.masked_max_rows(&masks.anchor_rows())
    }
}

fn check_masks(bv: &BatchVars<'_>, masks: &NegativeMasks) -> Result<()> {
    if masks.b != bv.len() {
        return Err(Error::invalid("negative masks do not match the batch size"));
    }
    Ok(())
}

/// A loss value plus bookkeeping about anchors left out.
#[derive(Debug, Clone, Copy)]
pub struct LossTerm<'t> {
    pub value: Var<'t>,
    /// Anchors without admissible negatives (dropped from hinge losses).
    pub excluded_anchors: usize,
    /// No admissible negative at all in the batch.
    pub no_negatives: bool,
}

pub fn circle_descriptor_loss<'t>(
    bv: &BatchVars<'t>,
    masks: &NegativeMasks,
    p: &CircleParams,
    form: CircleForm,
) -> Result<LossTerm<'t>> {
    check_masks(bv, masks)?;
    let tape = bv.tape();
    let b = bv.len();
    let weights = masks.pair_weights();
    let no_negatives = weights.iter().all(|&w| w == 0.0);
    let w = tape.constant(Tensor::matrix(b, b, weights.clone())?)?;
    // ζ(Δp - d_p)[O_p - d_p]_+ and ζ(s - Δn)[s - O_n]_+.
    let ep = bv
        .dp
        .neg()?
        .add_scalar(p.delta_p())?
        .mul(bv.dp.neg()?.add_scalar(p.o_p())?.relu()?)?
        .scale(p.zeta)?;
    let en = bv
        .sim
        .add_scalar(-p.delta_n())?
        .mul(bv.sim.add_scalar(-p.o_n())?.relu()?)?
        .scale(p.zeta)?;
    let value = match form {
        CircleForm::AsWritten => {
            let pos = ep.clamp_max(EXP_CLAMP)?.exp()?.sum()?;
            let neg = en.clamp_max(EXP_CLAMP)?.exp()?.mul(w)?.sum()?;
            pos.add(neg)?.softplus()?
        }
        CircleForm::Canonical => {
            if no_negatives {
                tape.constant(Tensor::scalar(0.0))?
            } else {
                let lse_p = log_sum_exp(ep, None)?;
                let lse_n = log_sum_exp(en, Some((w, &weights)))?;
                lse_p.add(lse_n)?.softplus()?
            }
        }
    };
    Ok(LossTerm {
        value,
        excluded_anchors: masks.empty_anchors(),
        no_negatives,
    })
}

/// `log Σ w·exp(x)`, shifted by the largest weighted entry.
fn log_sum_exp<'t>(x: Var<'t>, weights: Option<(Var<'t>, &[f64])>) -> Result<Var<'t>> {
    let xv = x.value();
    let shift = xv
        .data()
        .iter()
        .enumerate()
        .filter(|(k, _)| weights.is_none_or(|(_, w)| w[*k] > 0.0))
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let e = x.add_scalar(-shift)?.exp()?;
    let e = match weights {
        Some((w, _)) => e.mul(w)?,
        None => e,
    };
    e.sum()?.log()?.add_scalar(shift)
}

fn mean_over<'t>(v: Var<'t>, keep: &[bool]) -> Result<Var<'t>> {
    let idx: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
    if idx.is_empty() {
        return v.tape().constant(Tensor::scalar(0.0));
    }
    v.gather_rows(&idx)?.mean()
}

pub fn hard_triplet_loss<'t>(
    bv: &BatchVars<'t>,
    masks: &NegativeMasks,
    margins: &MarginParams,
    form: TripletForm,
) -> Result<LossTerm<'t>> {
    let (dn, has) = bv.hardest_negatives(masks)?;
    let hinge = match form {
        TripletForm::Standard => dn.sub(bv.dp)?.add_scalar(margins.triplet)?.relu()?,
        TripletForm::Literal => bv.dp.sub(dn)?.add_scalar(-margins.triplet)?.relu()?,
    };
    Ok(LossTerm {
        value: mean_over(hinge, &has)?,
        excluded_anchors: has.iter().filter(|h| !**h).count(),
        no_negatives: !has.iter().any(|h| *h),
    })
}

pub fn hard_contrastive_loss<'t>(
    bv: &BatchVars<'t>,
    masks: &NegativeMasks,
    margins: &MarginParams,
) -> Result<LossTerm<'t>> {
    let (dn, has) = bv.hardest_negatives(masks)?;
    let pos = bv.dp.neg()?.add_scalar(margins.positive)?.relu()?;
    let neg = dn.add_scalar(-margins.negative)?.relu()?;
    Ok(LossTerm {
        value: mean_over(pos.add(neg)?, &has)?,
        excluded_anchors: has.iter().filter(|h| !**h).count(),
        no_negatives: !has.iter().any(|h| *h),
    })
}

pub fn descriptor_loss<'t>(bv: &BatchVars<'t>, masks: &NegativeMasks, cfg: &LossConfig) -> Result<LossTerm<'t>> {
    match cfg.descriptor {
        DescriptorLossKind::Circle => {
            if cfg.circle_safe_radius {
                circle_descriptor_loss(bv, masks, &cfg.circle, cfg.circle_form)
            } else {
                circle_descriptor_loss(bv, &NegativeMasks::all_off_diagonal(bv.len()), &cfg.circle, cfg.circle_form)
            }
        }
        DescriptorLossKind::Triplet => hard_triplet_loss(bv, masks, &cfg.margins, cfg.triplet_form),
        DescriptorLossKind::Contrastive => hard_contrastive_loss(bv, masks, &cfg.margins),
    }
}

/// `S_{X_i} S_{Y_i} / Σ_j S_{X_j} S_{Y_j}`; the last weight is formed as
/// one minus the others so the sequential sum is exactly 1.
pub fn detector_weights(sx: &[f64], sy: &[f64]) -> Result<Vec<f64>> {
    if sx.len() != sy.len() || sx.is_empty() {
        return Err(Error::invalid("score vectors must be non-empty and equally long"));
    }
    let prod: Vec<f64> = sx.iter().zip(sy).map(|(a, b)| a * b).collect();
    let total: f64 = prod.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Numeric { op: "detector_weights" });
    }
    let n = prod.len();
    let mut w: Vec<f64> = prod[..n - 1].iter().map(|p| p / total).collect();
    let head: f64 = w.iter().sum();
    w.push(1.0 - head);
    Ok(w)
}

/// Score-weighted gap between the hardest negative (over every mismatch
/// in the batch, both directions) and the positive.
pub fn detector_loss<'t>(bv: &BatchVars<'t>, sx: Var<'t>, sy: Var<'t>) -> Result<Var<'t>> {
    let b = bv.len();
    if sx.shape() != [b] || sy.shape() != [b] {
        return Err(Error::invalid("detector scores must be [B]"));
    }
    if b < 2 {
        return bv.tape().constant(Tensor::scalar(0.0));
    }
    let (dn, _) = bv.hardest_negatives(&NegativeMasks::all_off_diagonal(b))?;
    let gap = dn.sub(bv.dp)?;
    let prod = sx.mul(sy)?;
    let total = prod.sum()?;
    let head: Vec<usize> = (0..b - 1).collect();
    let w_head = prod.gather_rows(&head)?.div(total)?;
    let w_last = w_head.sum()?.neg()?.add_scalar(1.0)?;
    let g_head = gap.gather_rows(&head)?;
    let g_last = gap.gather_rows(&[b - 1])?.reshape(Vec::<usize>::new())?;
    w_head.mul(g_head)?.sum()?.add(w_last.mul(g_last)?)
}

pub fn combined_loss<'t>(desc: Var<'t>, det: Var<'t>, lambda: f64) -> Result<Var<'t>> {
    desc.add(det.scale(lambda)?)
}

/// One similarity-trace sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityRow {
    pub mean_dp: f64,
    /// Mean over anchors of the hardest admissible negative.
    pub mean_dn_star: f64,
}

pub fn trace_row(bv: &BatchVars<'_>, masks: &NegativeMasks) -> Result<SimilarityRow> {
    let dp = bv.dp.value();
    let sim = bv.sim.value();
    let b = bv.len();
    let rows = masks.anchor_rows();
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..b {
        let mut best = f64::NEG_INFINITY;
        for k in 0..2 * b {
            if rows[i * 2 * b + k] {
                let v = if k < b { sim.at2(i, k) } else { sim.at2(k - b, i) };
                best = best.max(v);
            }
        }
        if best.is_finite() {
            total += best;
            count += 1;
        }
    }
    Ok(SimilarityRow {
        mean_dp: dp.data().iter().sum::<f64>() / b as f64,
        mean_dn_star: if count > 0 { total / count as f64 } else { 0.0 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check_many, DEFAULT_EPS};
    use rand::{Rng, SeedableRng};

    fn softplus(x: f64) -> f64 {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }

    /// One positive and one admissible negative.
    fn single_pair_circle(dp: f64, dn: f64) -> f64 {
        let p = CircleParams::default();
        let pos = (p.zeta * (p.delta_p() - dp) * (p.o_p() - dp).max(0.0)).exp();
        let neg = (p.zeta * (dn - p.delta_n()) * (dn - p.o_n()).max(0.0)).exp();
        softplus(pos + neg)
    }

    #[test]
    fn paper_constants() {
        let c = CircleParams::default();
        assert_eq!((c.m, c.zeta), (0.2, 10.0));
        assert_eq!((c.o_p(), c.o_n(), c.delta_p(), c.delta_n()), (1.2, -0.2, 0.8, 0.2));
        let l = LossConfig::default();
        assert_eq!((l.radii.image, l.radii.cloud, l.lambda), (12.0, 0.015, 1.0));
    }

    fn unit_batch<'t>(tape: &'t Tape, x: Vec<[f64; 2]>, y: Vec<[f64; 2]>) -> BatchVars<'t> {
        let n = x.len();
        let dx = tape.constant(Tensor::matrix(n, 2, x.concat()).unwrap()).unwrap();
        let dy = tape.constant(Tensor::matrix(n, 2, y.concat()).unwrap()).unwrap();
        BatchVars::new(dx, dy).unwrap()
    }

    /// A 2-sample batch where only `sim[0][1]` is an admissible negative.
    fn one_negative_masks() -> NegativeMasks {
        NegativeMasks {
            b: 2,
            pixel_anchor: vec![false, true, false, false],
            point_anchor: vec![false; 4],
        }
    }

    #[test]
    fn circle_hand_examples() {
        let p = CircleParams::default();
        assert!((single_pair_circle(1.0, -1.0) - 1.842748516860556).abs() < 1e-12);
        assert!((single_pair_circle(p.delta_p(), p.o_n()) - 2.1269280110429727).abs() < 1e-12);

        // X = (e1, e2), Y = (u, e2) with d_p = (0.8, 1) and only sim[0][1] = 0 admissible.
        let tape = Tape::new();
        let th = 0.8f64.acos();
        let bv = unit_batch(&tape, vec![[1.0, 0.0], [0.0, 1.0]], vec![[th.cos(), th.sin()], [0.0, 1.0]]);
        let v = circle_descriptor_loss(&bv, &one_negative_masks(), &p, CircleForm::AsWritten).unwrap();
        let oracle = softplus(
            (p.zeta * (p.delta_p() - 0.8) * (p.o_p() - 0.8)).exp()
                + (p.zeta * (p.delta_p() - 1.0) * (p.o_p() - 1.0)).exp()
                + (p.zeta * (0.0 - p.delta_n()) * (0.0 - p.o_n())).exp(),
        );
        assert!((v.value.item() - oracle).abs() < 1e-12);
        let c = circle_descriptor_loss(&bv, &one_negative_masks(), &p, CircleForm::Canonical).unwrap();
        let lse_p = ((p.zeta * (p.delta_p() - 0.8) * (p.o_p() - 0.8)).exp()
            + (p.zeta * (p.delta_p() - 1.0) * (p.o_p() - 1.0)).exp())
        .ln();
        let lse_n = p.zeta * (0.0 - p.delta_n()) * (0.0 - p.o_n());
        assert!((c.value.item() - softplus(lse_p + lse_n)).abs() < 1e-12);
    }

    #[test]
    fn baseline_hand_examples() {
        let tape = Tape::new();
        let m = MarginParams::default();
        let masks = NegativeMasks {
            b: 2,
            pixel_anchor: vec![false, true, true, false],
            point_anchor: vec![false, true, true, false],
        };
        // d_p = 1, d_n = -1.
        let bv = unit_batch(&tape, vec![[1.0, 0.0], [-1.0, 0.0]], vec![[1.0, 0.0], [-1.0, 0.0]]);
        let t = hard_triplet_loss(&bv, &masks, &m, TripletForm::Standard).unwrap();
        assert_eq!(t.value.item(), 0.0);
        // d_p = 1, d_n = 0.
        let bv = unit_batch(&tape, vec![[1.0, 0.0], [0.0, 1.0]], vec![[1.0, 0.0], [0.0, 1.0]]);
        let c = hard_contrastive_loss(&bv, &masks, &m).unwrap();
        assert_eq!(c.value.item(), 0.0);
        // d_p = 0.5, d_n = 0.5.
        let a = std::f64::consts::FRAC_PI_3;
        let bv = unit_batch(
            &tape,
            vec![[1.0, 0.0], [1.0, 0.0]],
            vec![[a.cos(), a.sin()], [a.cos(), -a.sin()]],
        );
        let t = hard_triplet_loss(&bv, &masks, &m, TripletForm::Standard).unwrap();
        assert!((t.value.item() - 0.2).abs() < 1e-12);
        let lit = hard_triplet_loss(&bv, &masks, &m, TripletForm::Literal).unwrap();
        assert_eq!(lit.value.item(), 0.0);
    }

    #[test]
    fn anchors_without_negatives_are_excluded() {
        let tape = Tape::new();
        let bv = unit_batch(&tape, vec![[1.0, 0.0], [0.0, 1.0]], vec![[1.0, 0.0], [0.0, 1.0]]);
        let t = hard_triplet_loss(&bv, &one_negative_masks(), &MarginParams::default(), TripletForm::Standard).unwrap();
        assert_eq!(t.excluded_anchors, 1);
        let none = NegativeMasks {
            b: 2,
            pixel_anchor: vec![false; 4],
            point_anchor: vec![false; 4],
        };
        let c = circle_descriptor_loss(&bv, &none, &CircleParams::default(), CircleForm::AsWritten).unwrap();
        assert!(c.no_negatives);
        assert_eq!(c.excluded_anchors, 2);
    }

    #[test]
    fn safe_radius_masks() {
        let cloud = vec![Point3::new(0.0, 0.0, 1.0), Point3::new(0.01, 0.0, 1.0), Point3::new(0.5, 0.0, 1.0)];
        // Pixels 0 and 1 are 5 px apart, pixel 2 is far.
        let batch = LossBatch::from_pairs(&[(0, 0), (5, 1), (100 * 40, 2)], 100, &cloud).unwrap();
        let m = NegativeMasks::new(&batch, &SafeRadii::default());
        assert_eq!(m.point_anchor, vec![false, false, true, false, false, true, true, true, false]);
        assert_eq!(m.pixel_anchor, vec![false, false, true, false, false, true, true, true, false]);
        assert_eq!(m.pair_weights(), vec![0.0, 0.0, 2.0, 0.0, 0.0, 2.0, 2.0, 2.0, 0.0]);
    }

    #[test]
    fn sampling_is_seeded_and_complete() {
        use crate::pipeline::{Correspondence, CorrespondenceKind};
        let cloud: Vec<Point3> = (0..10).map(|i| Point3::new(i as f64, 0.0, 1.0)).collect();
        let pairs = (0..10)
            .map(|i| Correspondence {
                pixel: i * 3,
                point: i,
                distance: 0.0,
            })
            .collect();
        let corr = CorrespondenceSet::new(CorrespondenceKind::GroundTruth, pairs);
        let a = LossBatch::sample(&corr, 8, &cloud, 10, 7).unwrap().unwrap();
        let b = LossBatch::sample(&corr, 8, &cloud, 10, 7).unwrap().unwrap();
        assert_eq!(a, b);
        let mut pts = a.points.clone();
        pts.sort();
        assert_eq!(pts, (0..10).collect::<Vec<_>>());
        assert!(LossBatch::sample(&corr, 8, &cloud, 11, 7).unwrap().is_none());
    }

    #[test]
    fn detector_weights_sum_to_one_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let n = rng.random_range(1..300);
            let sx: Vec<f64> = (0..n).map(|_| rng.random_range(1e-6..1.0)).collect();
            let sy: Vec<f64> = (0..n).map(|_| rng.random_range(1e-6..1.0)).collect();
            let w = detector_weights(&sx, &sy).unwrap();
            assert_eq!(w.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn detector_loss_special_cases() {
        let tape = Tape::new();
        // All similarities equal: hardest negative equals d_p.
        let bv = unit_batch(&tape, vec![[1.0, 0.0]; 3], vec![[0.6, 0.8]; 3]);
        let s = tape.constant(Tensor::vector(vec![0.2, 0.5, 0.3])).unwrap();
        assert!(detector_loss(&bv, s, s).unwrap().item().abs() < 1e-15);
        // Uniform scores give the plain mean.
        let bv = unit_batch(&tape, vec![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]], vec![[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]]);
        let u = tape.constant(Tensor::vector(vec![1.0 / 3.0; 3])).unwrap();
        let sim = bv.sim.value();
        let mut expected = 0.0;
        for i in 0..3 {
            let mut best = f64::NEG_INFINITY;
            for j in 0..3 {
                if j != i {
                    best = best.max(sim.at2(i, j)).max(sim.at2(j, i));
                }
            }
            expected += (best - sim.at2(i, i)) / 3.0;
        }
        assert!((detector_loss(&bv, u, u).unwrap().item() - expected).abs() < 1e-15);
    }

    #[test]
    fn combined_and_trace() {
        let tape = Tape::new();
        let one = tape.constant(Tensor::scalar(1.0)).unwrap();
        assert_eq!(combined_loss(one, one, 1.0).unwrap().item(), 2.0);
        assert_eq!(combined_loss(one, one, 0.0).unwrap().item(), 1.0);
        let bv = unit_batch(&tape, vec![[1.0, 0.0], [0.0, 1.0]], vec![[0.0, 1.0], [1.0, 0.0]]);
        let r = trace_row(&bv, &NegativeMasks::all_off_diagonal(2)).unwrap();
        assert_eq!((r.mean_dp, r.mean_dn_star), (0.0, 1.0));
    }

    fn random_unit(rng: &mut ChaCha8Rng, b: usize, c: usize) -> Tensor {
        let mut t = Tensor::matrix(b, c, (0..b * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        for r in 0..b {
            let n: f64 = t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            t.data_mut()[r * c..(r + 1) * c].iter_mut().for_each(|v| *v /= n);
        }
        t
    }

    fn random_masks(rng: &mut ChaCha8Rng, b: usize) -> NegativeMasks {
        let m = |rng: &mut ChaCha8Rng| (0..b * b).map(|k| k / b != k % b && rng.random_bool(0.7)).collect();
        NegativeMasks {
            b,
            pixel_anchor: m(rng),
            point_anchor: m(rng),
        }
    }

    #[test]
    fn losses_pass_grad_check() {
        let cfg = LossConfig::default();
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_unit(&mut rng, 8, 8);
            // Positives as perturbed copies keep every exponent moderate; with
            // d_p near -1 one term dominates and most coordinates get
            // gradients below finite-difference resolution.
            let noise = random_unit(&mut rng, 8, 8);
            let y = Tensor::matrix(8, 8, x.data().iter().zip(noise.data()).map(|(a, n)| a + 0.6 * n).collect()).unwrap();
            let s = Tensor::vector((0..8).map(|_| rng.random_range(0.01..0.2)).collect());
            let t = Tensor::vector((0..8).map(|_| rng.random_range(0.01..0.2)).collect());
            let masks = random_masks(&mut rng, 8);
            let check = |name: &str, f: &dyn for<'t> Fn(&BatchVars<'t>, Var<'t>, Var<'t>) -> Result<Var<'t>>| {
                let rep = grad_check_many(
                    |_, v| {
                        let bv = BatchVars::new(v[0].l2_normalize()?, v[1].l2_normalize()?)?;
                        f(&bv, v[2], v[3])
                    },
                    &[x.clone(), y.clone(), s.clone(), t.clone()],
                    DEFAULT_EPS,
                )
                .unwrap();
                assert!(rep.max_rel_error < 1e-4, "{name} seed {seed}: {rep:?}");
            };
            check("circle", &|bv, _, _| Ok(circle_descriptor_loss(bv, &masks, &cfg.circle, CircleForm::AsWritten)?.value));
            check("circle_canonical", &|bv, _, _| Ok(circle_descriptor_loss(bv, &masks, &cfg.circle, CircleForm::Canonical)?.value));
            check("triplet", &|bv, _, _| Ok(hard_triplet_loss(bv, &masks, &cfg.margins, TripletForm::Standard)?.value));
            check("contrastive", &|bv, _, _| Ok(hard_contrastive_loss(bv, &masks, &cfg.margins)?.value));
            check("detector", &|bv, sx, sy| detector_loss(bv, sx, sy));
            check("combined", &|bv, sx, sy| {
                combined_loss(circle_descriptor_loss(bv, &masks, &cfg.circle, CircleForm::AsWritten)?.value, detector_loss(bv, sx, sy)?, 1.0)
            });
        }
    }
}
