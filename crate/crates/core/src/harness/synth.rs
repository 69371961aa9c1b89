//! Random textured primitive scenes, rendered to RGB-D by point splatting
//! with a z-buffer.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::SynthConfig;
use crate::error::Result;
use crate::geometry::{CameraIntrinsics, Point3, RigidTransform};
use crate::pipeline::{DepthImage, Image, KdTree};

/// Gray used where no surface is hit.
pub const BACKGROUND: [f64; 3] = [0.5, 0.5, 0.5];
const NEAR: f64 = 0.05;

/// Dense colored surface samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub points: Vec<Point3>,
    pub colors: Vec<[f64; 3]>,
}

/// Jittered-grid samples of the parallelogram `origin + s·a + t·b`.
fn sample_patch(rng: &mut ChaCha8Rng, origin: Vector3<f64>, a: Vector3<f64>, b: Vector3<f64>, spacing: f64, out: &mut Vec<Point3>) {
    let na = (a.norm() / spacing).ceil().max(1.0) as usize;
    let nb = (b.norm() / spacing).ceil().max(1.0) as usize;
    for i in 0..na {
        for j in 0..nb {
            let s = (i as f64 + rng.random::<f64>()) / na as f64;
            let t = (j as f64 + rng.random::<f64>()) / nb as f64;
            out.push(Point3::from(origin + a * s + b * t));
        }
    }
}

fn sample_box(rng: &mut ChaCha8Rng, center: Vector3<f64>, half: Vector3<f64>, yaw: f64, spacing: f64, out: &mut Vec<Point3>) {
    let r = Matrix3::new(yaw.cos(), -yaw.sin(), 0.0, yaw.sin(), yaw.cos(), 0.0, 0.0, 0.0, 1.0);
    let ax = r * Vector3::x() * half.x;
    let ay = r * Vector3::y() * half.y;
    let az = Vector3::z() * half.z;
    // Five faces; the bottom rests on the floor.
    let faces = [
        (center + az - ax - ay, 2.0 * ax, 2.0 * ay),
        (center - ax - ay - az, 2.0 * ax, 2.0 * az),
        (center - ax + ay - az, 2.0 * ax, 2.0 * az),
        (center - ax - ay - az, 2.0 * ay, 2.0 * az),
        (center + ax - ay - az, 2.0 * ay, 2.0 * az),
    ];
    for (o, a, b) in faces {
        sample_patch(rng, o, a, b, spacing, out);
    }
}

/// Fibonacci-lattice samples of the part of a sphere above the floor.
fn sample_sphere(center: Vector3<f64>, radius: f64, spacing: f64, out: &mut Vec<Point3>) {
    let n = (4.0 * std::f64::consts::PI * radius * radius / (spacing * spacing)).ceil() as usize;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    for i in 0..n {
        let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        let r = (1.0 - z * z).sqrt();
        let th = golden * i as f64;
        let p = center + Vector3::new(r * th.cos(), r * th.sin(), z) * radius;
        if p.z > 0.0 {
            out.push(Point3::from(p));
        }
    }
}

/// A floor with a few boxes and spheres, textured by a solid Voronoi
/// pattern (each point takes the color of its nearest seed).
pub fn generate_scene(cfg: &SynthConfig, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.surface_spacing;
    let mut points = Vec::new();
    let floor = 0.8;
    sample_patch(
        &mut rng,
        Vector3::new(-floor, -floor, 0.0),
        Vector3::new(2.0 * floor, 0.0, 0.0),
        Vector3::new(0.0, 2.0 * floor, 0.0),
        s,
        &mut points,
    );
    let n_obj = rng.random_range(3..=6);
    for _ in 0..n_obj {
        let c = Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), 0.0);
        if rng.random_bool(0.6) {
            let half = Vector3::new(rng.random_range(0.04..0.14), rng.random_range(0.04..0.14), rng.random_range(0.04..0.16));
            let yaw = rng.random_range(0.0..std::f64::consts::PI);
            sample_box(&mut rng, c + Vector3::z() * half.z, half, yaw, s, &mut points);
        } else {
            let r = rng.random_range(0.05..0.13);
            let lift = rng.random_range(0.0..r * 0.6);
            sample_sphere(c + Vector3::z() * (r - lift), r, s, &mut points);
        }
    }
    let cell = cfg.texture_cell;
    let (lo, hi) = (Vector3::new(-floor, -floor, -0.05), Vector3::new(floor, floor, 0.4));
    let ext = hi - lo;
    let n_seeds = ((ext.x * ext.y * ext.z) / cell.powi(3)).ceil() as usize;
    let seeds: Vec<Point3> = (0..n_seeds)
        .map(|_| {
            Point3::new(
                rng.random_range(lo.x..hi.x),
                rng.random_range(lo.y..hi.y),
                rng.random_range(lo.z..hi.z),
            )
        })
        .collect();
    let palette: Vec<[f64; 3]> = (0..n_seeds)
        .map(|_| [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)])
        .collect();
    let tree = KdTree::build(&seeds);
    let colors = points
        .iter()
        .map(|p| palette[tree.nearest(p).map(|n| n.index).unwrap_or(0)])
        .collect();
    Scene { points, colors }
}

/// Camera-to-world pose at `eye` looking at `target` with world `+z` up.
/// Camera axes: x right, y down, z forward.
pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>) -> RigidTransform {
    let fwd = (target - eye).normalize();
    let right = fwd.cross(&Vector3::z()).normalize();
    let down = fwd.cross(&right);
    RigidTransform::from_approx_rotation(Matrix3::from_columns(&[right, down, fwd]), eye)
}

/// `n` consecutive poses drifting sideways around a random viewpoint.
pub fn frame_poses(cfg: &SynthConfig, n: usize, seed: u64) -> Vec<RigidTransform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let az: f64 = rng.random_range(0.0..2.0 * std::f64::consts::PI);
    let el: f64 = rng.random_range(0.5..0.85);
    let dist = rng.random_range(cfg.camera_distance[0]..=cfg.camera_distance[1]);
    let target = Vector3::new(rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08), rng.random_range(0.03..0.1));
    let eye = target + Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * dist;
    let fwd = (target - eye).normalize();
    let right = fwd.cross(&Vector3::z()).normalize();
    let mid = (n as f64 - 1.0) / 2.0;
    (0..n)
        .map(|k| {
            let off = right * (k as f64 - mid) * cfg.frame_step;
            look_at(eye + off, target + off * 0.5)
        })
        .collect()
}

/// Splats every scene point into its nearest pixel; the closest point wins
/// (first one on exact ties). Depth is the winning point's camera-frame z.
pub fn render(scene: &Scene, k: &CameraIntrinsics, pose: &RigidTransform) -> Result<(Image, DepthImage)> {
    let w2c = pose.inverse();
    let n = k.num_pixels();
    let mut zbuf = vec![f64::INFINITY; n];
    let mut winner = vec![usize::MAX; n];
    for (i, p) in scene.points.iter().enumerate() {
        let c = w2c.apply(p);
        if c.z <= NEAR {
            continue;
        }
        let u = (k.fx * c.x / c.z + k.cx).round();
        let v = (k.fy * c.y / c.z + k.cy).round();
        if u < 0.0 || v < 0.0 || u >= k.width as f64 || v >= k.height as f64 {
            continue;
        }
        let idx = v as usize * k.width + u as usize;
        if c.z < zbuf[idx] {
            zbuf[idx] = c.z;
            winner[idx] = i;
        }
    }
    let mut image = Image::zeros(k.width, k.height, 3);
    let mut depth = vec![0.0; n];
    for idx in 0..n {
        let px = image.pixel_mut(idx);
        if winner[idx] == usize::MAX {
            px.copy_from_slice(&BACKGROUND);
        } else {
            px.copy_from_slice(&scene.colors[winner[idx]]);
            depth[idx] = zbuf[idx];
        }
    }
    Ok((image, DepthImage::from_depths(k.width, k.height, depth)?))
}
