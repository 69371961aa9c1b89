//! Brute-force reference implementations and random instance generators
//! shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;

use nalgebra::Vector3;
use pixpoint::autodiff::Tensor;
use pixpoint::geometry::{CameraIntrinsics, Pixel, Point3, RigidTransform};
use pixpoint::pipeline::{DepthImage, PointCloud};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn dist(a: &Point3, b: &Point3) -> f64 {
    ((a.x - b.x).powi(2) + (a.y - b.y).powi(2) + (a.z - b.z).powi(2)).sqrt()
}

pub fn random_map(rng: &mut ChaCha8Rng, t: usize, c: usize) -> Tensor {
    Tensor::matrix(t, c, (0..t * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// A map with few distinct values, so ties are frequent.
pub fn quantized_map(rng: &mut ChaCha8Rng, t: usize, c: usize) -> Tensor {
    Tensor::matrix(t, c, (0..t * c).map(|_| rng.random_range(0..4) as f64).collect()).unwrap()
}

pub fn random_points(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<Point3> {
    (0..n)
        .map(|_| Point3::new(rng.random_range(0.0..extent), rng.random_range(0.0..extent), rng.random_range(0.0..extent)))
        .collect()
}

pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Tensor {
    let mut d = Vec::with_capacity(n * c);
    for _ in 0..n {
        let row: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        d.extend(row.iter().map(|v| v / norm));
    }
    Tensor::matrix(n, c, d).unwrap()
}

fn argmax_first(row: &[f64]) -> usize {
    let mut best = 0;
    for k in 1..row.len() {
        if row[k] > row[best] {
            best = k;
        }
    }
    best
}

/// Image keypoints: the argmax channel value beats every other pixel of the
/// clipped `(2r+1)²` window.
pub fn hard_detect_image(d: &Tensor, height: usize, width: usize, radius: usize) -> Vec<bool> {
    let c = d.shape()[1];
    let r = radius as i64;
    (0..height * width)
        .map(|i| {
            let (y, x) = ((i / width) as i64, (i % width) as i64);
            let k = argmax_first(d.row(i));
            let v = d.data()[i * c + k];
            let mut ok = true;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if (dy, dx) == (0, 0) || yy < 0 || xx < 0 || yy >= height as i64 || xx >= width as i64 {
                        continue;
                    }
                    let j = yy as usize * width + xx as usize;
                    ok &= d.data()[j * c + k] < v;
                }
            }
            ok
        })
        .collect()
}

pub fn hard_detect_cloud(d: &Tensor, points: &[Point3], radius: f64) -> Vec<bool> {
    let c = d.shape()[1];
    (0..points.len())
        .map(|i| {
            let k = argmax_first(d.row(i));
            let v = d.data()[i * c + k];
            (0..points.len()).all(|j| j == i || dist(&points[i], &points[j]) > radius || d.data()[j * c + k] < v)
        })
        .collect()
}

/// Soft scores straight from the definition, given each location's
/// neighborhood (self included).
pub fn soft_scores(d: &Tensor, neighborhoods: &[Vec<usize>]) -> Vec<f64> {
    let (t, c) = (d.shape()[0], d.shape()[1]);
    let gamma: Vec<f64> = (0..t)
        .map(|i| {
            let row = d.row(i);
            let chan_mean = row.iter().sum::<f64>() / c as f64;
            (0..c)
                .map(|k| {
                    let nb = &neighborhoods[i];
                    let local = nb.iter().map(|&j| d.row(j)[k]).sum::<f64>() / nb.len() as f64;
                    softplus(row[k] - local) * softplus(row[k] - chan_mean)
                })
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let total: f64 = gamma.iter().sum();
    gamma.iter().map(|g| g / total).collect()
}

pub fn image_windows(height: usize, width: usize, radius: usize) -> Vec<Vec<usize>> {
    let r = radius as i64;
    (0..height * width)
        .map(|i| {
            let (y, x) = ((i / width) as i64, (i % width) as i64);
            let mut v = Vec::new();
            for yy in (y - r)..=(y + r) {
                for xx in (x - r)..=(x + r) {
                    if yy >= 0 && xx >= 0 && yy < height as i64 && xx < width as i64 {
                        v.push(yy as usize * width + xx as usize);
                    }
                }
            }
            v
        })
        .collect()
}

pub fn radius_balls(points: &[Point3], radius: f64) -> Vec<Vec<usize>> {
    points.iter().map(|p| within_radius(points, p, radius)).collect()
}

/// Mutual nearest neighbors by scanning all pairs; ties go to the lower index.
pub fn mutual_nn(x: &Tensor, y: &Tensor) -> Vec<(usize, usize)> {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    let nn = |a: &Tensor, b: &Tensor, i: usize| {
        let mut best = (f64::INFINITY, 0);
        for j in 0..b.shape()[0] {
            let d = sq(a.row(i), b.row(j));
            if d < best.0 {
                best = (d, j);
            }
        }
        best.1
    };
    (0..x.shape()[0]).filter_map(|i| {
        let j = nn(x, y, i);
        (nn(y, x, j) == i).then_some((i, j))
    })
    .collect()
}

/// `(index, distance)` of the `k` nearest points, ties by lower index.
pub fn knn(points: &[Point3], q: &Point3, k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = points.iter().enumerate().map(|(i, p)| (i, dist(p, q))).collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

pub fn within_radius(points: &[Point3], q: &Point3, r: f64) -> Vec<usize> {
    (0..points.len()).filter(|&i| dist(&points[i], q) <= r).collect()
}

/// Voxel barycenters in first-appearance order.
pub fn grid_subsample(points: &[Point3], voxel: f64) -> Vec<Point3> {
    let mut order: Vec<(i64, i64, i64)> = Vec::new();
    let mut groups: HashMap<(i64, i64, i64), Vec<Point3>> = HashMap::new();
    for p in points {
        let key = ((p.x / voxel).floor() as i64, (p.y / voxel).floor() as i64, (p.z / voxel).floor() as i64);
        groups
            .entry(key)
            .or_insert_with(|| {
                order.push(key);
                Vec::new()
            })
            .push(*p);
    }
    order
        .iter()
        .map(|k| {
            let g = &groups[k];
            let n = g.len() as f64;
            Point3::new(
                g.iter().map(|p| p.x).sum::<f64>() / n,
                g.iter().map(|p| p.y).sum::<f64>() / n,
                g.iter().map(|p| p.z).sum::<f64>() / n,
            )
        })
        .collect()
}

/// `(pixel, point)` pairs: every valid pixel lifted to the cloud frame and
/// matched to its nearest visible point when closer than `eta`.
pub fn label(depth: &DepthImage, k: &CameraIntrinsics, pose: &RigidTransform, cloud: &[Point3], eta: f64) -> Vec<(usize, usize)> {
    let inv = pose.inverse();
    let visible: Vec<usize> = (0..cloud.len())
        .filter(|&i| {
            let c = inv.apply(&cloud[i]);
            if c.z <= 0.0 {
                return false;
            }
            let u = k.fx * c.x / c.z + k.cx;
            let v = k.fy * c.y / c.z + k.cy;
            u >= 0.0 && v >= 0.0 && u < k.width as f64 && v < k.height as f64
        })
        .collect();
    let mut out = Vec::new();
    for pix in 0..k.num_pixels() {
        let Some(z) = depth.depth(pix) else { continue };
        let (u, v) = ((pix % k.width) as f64, (pix / k.width) as f64);
        let cam = Point3::new((u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z);
        let world = pose.apply(&cam);
        let mut best: Option<(f64, usize)> = None;
        for &i in &visible {
            let d = dist(&world, &cloud[i]);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
        if let Some((d, i)) = best {
            if d < eta {
                out.push((pix, i));
            }
        }
    }
    out
}

/// `(pixel_anchor, point_anchor)` masks from pixel and point coordinates.
pub fn negative_masks(pixels: &[Pixel], points: &[Point3], r_image: f64, r_cloud: f64) -> (Vec<bool>, Vec<bool>) {
    let b = pixels.len();
    let mut pa = vec![false; b * b];
    let mut qa = vec![false; b * b];
    for i in 0..b {
        for j in 0..b {
            if i != j {
                pa[i * b + j] = dist(&points[i], &points[j]) > r_cloud;
                let dpx = ((pixels[i].u - pixels[j].u).powi(2) + (pixels[i].v - pixels[j].v).powi(2)).sqrt();
                qa[i * b + j] = dpx > r_image;
            }
        }
    }
    (pa, qa)
}

/// A small RGB-D view of random points: depth from a random camera pose
/// plus a cloud that partly covers it.
pub struct LabelingInstance {
    pub k: CameraIntrinsics,
    pub pose: RigidTransform,
    pub depth: DepthImage,
    pub cloud: PointCloud,
}

pub fn labeling_instance(rng: &mut ChaCha8Rng) -> LabelingInstance {
    let (w, h) = (rng.random_range(4..12), rng.random_range(4..12));
    let k = CameraIntrinsics::new(10.0, 10.0, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap();
    let pose = RigidTransform::from_axis_angle(
        Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)),
        Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
    );
    let depths: Vec<f64> = (0..w * h)
        .map(|_| if rng.random_bool(0.8) { rng.random_range(0.5..2.0) } else { 0.0 })
        .collect();
    let depth = DepthImage::from_depths(w, h, depths).unwrap();
    let mut pts = Vec::new();
    for pix in depth.valid_indices().collect::<Vec<_>>() {
        if rng.random_bool(0.7) {
            let c = depth.lift(pix, &k).unwrap();
            let jitter = Vector3::new(rng.random_range(-0.04..0.04), rng.random_range(-0.04..0.04), rng.random_range(-0.04..0.04));
            pts.push(pose.apply(&(c + jitter)));
        }
    }
    // Points outside the view, some behind the camera.
    for _ in 0..rng.random_range(0..20) {
        let c = Point3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-2.0..3.0));
        pts.push(pose.apply(&c));
    }
    LabelingInstance {
        k,
        pose,
        depth,
        cloud: PointCloud::new(pts, None).unwrap(),
    }
}
