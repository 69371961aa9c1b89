//! Camera pose from pixel ↔ point matches: normalized DLT, Gauss–Newton
//! reprojection refinement and a seeded RANSAC loop with a 3D inlier test.
//!
//! Poses follow the rest of the crate: the returned transform maps camera
//! coordinates to the cloud frame.

use nalgebra::{DMatrix, Matrix3, Matrix6, Vector3, Vector6};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rodrigues, skew, CameraIntrinsics, Pixel, Point3, RigidTransform};

/// Minimal sample for the linear solver.
pub const MIN_SAMPLE: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub max_iterations: usize,
    pub sample_size: usize,
    /// 3D residual threshold (m).
    pub inlier_threshold: f64,
    pub confidence: f64,
    pub refine_iterations: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iterations: 1000,
            sample_size: MIN_SAMPLE,
            inlier_threshold: 0.045,
            confidence: 0.999,
            refine_iterations: 10,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_size < MIN_SAMPLE {
            return Err(Error::Config(format!("sample_size must be >= {MIN_SAMPLE}")));
        }
        if !(self.inlier_threshold > 0.0) || !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::Config("inlier_threshold > 0 and confidence in (0, 1) required".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// One pixel ↔ point match.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PnpMatch {
    pub pixel: Pixel,
    /// Point in the cloud frame.
    pub point: Point3,
    /// Γ of the pixel (camera frame), when its depth is valid.
    pub lifted: Option<Point3>,
}

/// World-to-camera extrinsics `x_cam = R y + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Extrinsics {
    r: Matrix3<f64>,
    t: Vector3<f64>,
}

impl Extrinsics {
    fn from_pose(pose: &RigidTransform) -> Self {
        let inv = pose.inverse();
        Self {
            r: *inv.rotation(),
            t: *inv.translation(),
        }
    }

    fn to_pose(self) -> RigidTransform {
        RigidTransform::from_approx_rotation(self.r, self.t).inverse()
    }

    fn cam(&self, y: &Point3) -> Vector3<f64> {
        self.r * y.coords + self.t
    }
}

fn check_lengths(pixels: &[Pixel], points: &[Point3]) -> Result<()> {
    if pixels.len() != points.len() {
        return Err(Error::invalid("pixel and point lists differ in length"));
    }
    Ok(())
}

/// Linear pose estimate from at least six non-coplanar matches.
pub fn pnp_dlt(pixels: &[Pixel], points: &[Point3], k: &CameraIntrinsics) -> Result<RigidTransform> {
    check_lengths(pixels, points)?;
    let n = points.len();
    if n < MIN_SAMPLE {
        return Err(Error::invalid(format!("DLT needs >= {MIN_SAMPLE} matches, got {n}")));
    }
    // Similarity normalization of the points.
    let centroid = points.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n as f64;
    let spread = points.iter().map(|p| (p.coords - centroid).norm()).sum::<f64>() / n as f64;
    if !(spread > 0.0) {
        return Err(Error::Degenerate("all points coincide".into()));
    }
    let scale = 3f64.sqrt() / spread;
    let cov = points.iter().fold(Matrix3::zeros(), |a, p| {
        let d = (p.coords - centroid) * scale;
        a + d * d.transpose()
    });
    let eig = cov.symmetric_eigen().eigenvalues;
    if eig.min() <= 1e-10 * eig.max() {
        return Err(Error::Degenerate("points are coplanar or collinear".into()));
    }

    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (i, (px, p)) in pixels.iter().zip(points).enumerate() {
        let x = (px.u - k.cx) / k.fx;
        let y = (px.v - k.cy) / k.fy;
        let q = (p.coords - centroid) * scale;
        let h = [q.x, q.y, q.z, 1.0];
        for c in 0..4 {
            a[(2 * i, c)] = h[c];
            a[(2 * i, 8 + c)] = -x * h[c];
            a[(2 * i + 1, 4 + c)] = h[c];
            a[(2 * i + 1, 8 + c)] = -y * h[c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(Error::Numeric { op: "pnp_dlt" })?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[i].total_cmp(&sv[j]));
    if sv[order[1]] <= 1e-10 * sv[order[sv.len() - 1]] {
        return Err(Error::Degenerate("DLT system is rank deficient".into()));
    }
    let h = v_t.row(order[0]);
    // P̂ acts on normalized points; fold the normalization back in.
    let mut m = Matrix3::from_fn(|r, c| h[4 * r + c]) * scale;
    let mut p4 = Vector3::from_fn(|r, _| h[4 * r + 3]) - m * centroid;
    if m.determinant() < 0.0 {
        m = -m;
        p4 = -p4;
    }
    let svd3 = m.svd(true, true);
    let (u, vt) = (svd3.u.unwrap(), svd3.v_t.unwrap());
    let s = svd3.singular_values.mean();
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Numeric { op: "pnp_dlt" });
    }
    let ext = Extrinsics {
        r: u * vt,
        t: p4 / s,
    };
    Ok(ext.to_pose())
}

/// Stacked reprojection residuals `π(x_cam) - pixel`, two per match.
/// Points at or behind the camera make the residual non-finite.
pub fn reprojection_residuals(
    pose: &RigidTransform,
    pixels: &[Pixel],
    points: &[Point3],
    k: &CameraIntrinsics,
) -> Result<Vec<f64>> {
    check_lengths(pixels, points)?;
    let ext = Extrinsics::from_pose(pose);
    Ok(residuals(&ext, pixels, points, k))
}

fn residuals(ext: &Extrinsics, pixels: &[Pixel], points: &[Point3], k: &CameraIntrinsics) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * pixels.len());
    for (px, p) in pixels.iter().zip(points) {
        let c = ext.cam(p);
        if c.z <= 1e-12 {
            out.extend([f64::INFINITY, f64::INFINITY]);
            continue;
        }
        out.push(k.fx * c.x / c.z + k.cx - px.u);
        out.push(k.fy * c.y / c.z + k.cy - px.v);
    }
    out
}

/// Jacobian of [`reprojection_residuals`] with respect to the update
/// `(ω, δ)` applied as `x_cam ← exp(ω) x_cam + δ`, row-major `2n × 6`.
pub fn reprojection_jacobian(pose: &RigidTransform, points: &[Point3], k: &CameraIntrinsics) -> Vec<[f64; 6]> {
    jacobian(&Extrinsics::from_pose(pose), points, k)
}

fn jacobian(ext: &Extrinsics, points: &[Point3], k: &CameraIntrinsics) -> Vec<[f64; 6]> {
    let mut rows = Vec::with_capacity(2 * points.len());
    for p in points {
        let c = ext.cam(p);
        let z2 = c.z * c.z;
        let dpi = [
            [k.fx / c.z, 0.0, -k.fx * c.x / z2],
            [0.0, k.fy / c.z, -k.fy * c.y / z2],
        ];
        // ∂x/∂ω = -[x]×, ∂x/∂δ = I.
        let dx_dw = -skew(&c);
        for d in dpi {
            let mut row = [0.0; 6];
            for j in 0..3 {
                row[j] = (0..3).map(|a| d[a] * dx_dw[(a, j)]).sum();
                row[3 + j] = d[j];
            }
            rows.push(row);
        }
    }
    rows
}

fn apply_update(ext: &Extrinsics, step: &Vector6<f64>) -> Extrinsics {
    let rot = rodrigues(&Vector3::new(step[0], step[1], step[2]));
    Extrinsics {
        r: rot * ext.r,
        t: rot * ext.t + Vector3::new(step[3], step[4], step[5]),
    }
}

fn cost(ext: &Extrinsics, pixels: &[Pixel], points: &[Point3], k: &CameraIntrinsics) -> f64 {
    residuals(ext, pixels, points, k).iter().map(|r| r * r).sum()
}

/// Sum of squared reprojection errors.
pub fn reprojection_cost(pose: &RigidTransform, pixels: &[Pixel], points: &[Point3], k: &CameraIntrinsics) -> Result<f64> {
    check_lengths(pixels, points)?;
    Ok(cost(&Extrinsics::from_pose(pose), pixels, points, k))
}

/// Gauss–Newton on the reprojection cost. A step that does not lower the
/// cost is halved up to ten times; if none helps, iteration stops.
pub fn refine_gauss_newton(
    initial: &RigidTransform,
    pixels: &[Pixel],
    points: &[Point3],
    k: &CameraIntrinsics,
    iterations: usize,
) -> Result<RigidTransform> {
    check_lengths(pixels, points)?;
    if points.len() < 3 {
        return Err(Error::invalid("refinement needs >= 3 matches"));
    }
    let mut ext = Extrinsics::from_pose(initial);
    let mut current = cost(&ext, pixels, points, k);
    if !current.is_finite() {
        return Err(Error::Degenerate("initial pose puts points behind the camera".into()));
    }
    for _ in 0..iterations {
        if current == 0.0 {
            break;
        }
        let r = residuals(&ext, pixels, points, k);
        let jac = jacobian(&ext, points, k);
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for (row, ri) in jac.iter().zip(&r) {
            let j = Vector6::from_row_slice(row);
            jtj += j * j.transpose();
            jtr += j * *ri;
        }
        let Some(mut step) = jtj.cholesky().map(|c| -c.solve(&jtr)) else {
            break;
        };
        let mut accepted = false;
        for _ in 0..=10 {
            let cand = apply_update(&ext, &step);
            let c = cost(&cand, pixels, points, k);
            if c < current {
                ext = cand;
                current = c;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(ext.to_pose())
}

/// Estimated pose and the matches consistent with it.
#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub pose: RigidTransform,
    /// Sorted indices into the match list.
    pub inliers: Vec<usize>,
    pub iterations: usize,
}

/// `||Γ(x) - T̂⁻¹ y||`, or `None` when the pixel has no depth.
pub fn match_residual(pose: &RigidTransform, m: &PnpMatch) -> Option<f64> {
    let lifted = m.lifted?;
    Some((lifted - pose.inverse().apply(&m.point)).norm())
}

fn inliers_of(pose: &RigidTransform, matches: &[PnpMatch], threshold: f64) -> Vec<usize> {
    let inv = pose.inverse();
    matches
        .iter()
        .enumerate()
        .filter(|(_, m)| m.lifted.is_some_and(|l| (l - inv.apply(&m.point)).norm() < threshold))
        .map(|(i, _)| i)
        .collect()
}

fn split(matches: &[PnpMatch], idx: &[usize]) -> (Vec<Pixel>, Vec<Point3>) {
    idx.iter().map(|&i| (matches[i].pixel, matches[i].point)).unzip()
}

/// Hypothesize-and-verify PnP. The best hypothesis (most inliers, earliest
/// iteration on ties) is refined on its inliers, and the inliers reported
/// are recomputed under the returned pose.
pub fn ransac_pnp(matches: &[PnpMatch], k: &CameraIntrinsics, cfg: &RansacConfig) -> Result<RansacResult> {
    cfg.validate()?;
    let n = matches.len();
    if n < cfg.sample_size {
        return Err(Error::RegistrationFailed(format!(
            "{n} matches, need at least {}",
            cfg.sample_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(RigidTransform, Vec<usize>)> = None;
    let mut bound = cfg.max_iterations;
    let mut iter = 0;
    while iter < bound.min(cfg.max_iterations) {
        iter += 1;
        let mut idx = sample(&mut rng, n, cfg.sample_size).into_vec();
        idx.sort_unstable();
        let (px, pts) = split(matches, &idx);
        let Ok(pose) = pnp_dlt(&px, &pts, k) else {
            continue;
        };
        let inl = inliers_of(&pose, matches, cfg.inlier_threshold);
        if best.as_ref().is_none_or(|(_, b)| inl.len() > b.len()) {
            let w = inl.len() as f64 / n as f64;
            bound = adaptive_bound(w, cfg.sample_size, cfg.confidence).unwrap_or(bound);
            best = Some((pose, inl));
        }
    }
    let (mut pose, mut inliers) = best.ok_or_else(|| Error::RegistrationFailed("no valid hypothesis".into()))?;
    if inliers.len() < cfg.sample_size {
        return Err(Error::RegistrationFailed(format!(
            "best consensus has {} inliers, need {}",
            inliers.len(),
            cfg.sample_size
        )));
    }
    // Refine, re-gather, refine again; keep a refinement only if it does not
    // lose consensus.
    for _ in 0..2 {
        let (px, pts) = split(matches, &inliers);
        let Ok(refined) = refine_gauss_newton(&pose, &px, &pts, k, cfg.refine_iterations) else {
            break;
        };
        let inl = inliers_of(&refined, matches, cfg.inlier_threshold);
        if inl.len() < inliers.len() {
            break;
        }
        pose = refined;
        inliers = inl;
    }
    Ok(RansacResult {
        pose,
        inliers,
        iterations: iter,
    })
}

/// Iterations needed to draw one all-inlier sample with probability
/// `confidence` when the inlier fraction is `w`.
pub fn adaptive_bound(w: f64, sample_size: usize, confidence: f64) -> Option<usize> {
    let p = w.powi(sample_size as i32);
    if p <= 0.0 {
        return None;
    }
    if p >= 1.0 {
        return Some(1);
    }
    let v = (1.0 - confidence).ln() / (1.0 - p).ln();
    v.is_finite().then(|| v.ceil().max(1.0) as usize)
}
