use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{Point3, RigidTransform};

/// Point positions (meters) with optional per-point RGB in `[0, 1]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub colors: Option<Vec<[f64; 3]>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, colors: Option<Vec<[f64; 3]>>) -> Result<Self> {
        if let Some(c) = &colors {
            if c.len() != points.len() {
                return Err(Error::invalid("color count differs from point count"));
            }
        }
        if points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(Error::invalid("point positions must be finite"));
        }
        Ok(Self { points, colors })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn transformed(&self, t: &RigidTransform) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| t.apply(p)).collect(),
            colors: self.colors.clone(),
        }
    }

    /// Subset of the cloud, in the order of `indices`.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            colors: self
                .colors
                .as_ref()
                .map(|c| indices.iter().map(|&i| c[i]).collect()),
        }
    }

    pub fn color(&self, i: usize) -> [f64; 3] {
        self.colors.as_ref().map_or([0.0; 3], |c| c[i])
    }
}

fn voxel_key(p: &Point3, voxel: f64) -> (i64, i64, i64) {
    (
        (p.x / voxel).floor() as i64,
        (p.y / voxel).floor() as i64,
        (p.z / voxel).floor() as i64,
    )
}

/// Replaces the points of every occupied voxel by their barycenter (colors
/// averaged likewise). Output order follows the first point seen per voxel.
pub fn grid_subsample(cloud: &PointCloud, voxel: f64) -> Result<PointCloud> {
    if !(voxel > 0.0) {
        return Err(Error::invalid("voxel size must be positive"));
    }
    let mut slot_of: HashMap<(i64, i64, i64), usize> = HashMap::new();
    let mut sums: Vec<([f64; 3], [f64; 3], usize)> = Vec::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let slot = *slot_of.entry(voxel_key(p, voxel)).or_insert_with(|| {
            sums.push(([0.0; 3], [0.0; 3], 0));
            sums.len() - 1
        });
        let entry = &mut sums[slot];
        for a in 0..3 {
            entry.0[a] += p[a];
        }
        if let Some(colors) = &cloud.colors {
            for a in 0..3 {
                entry.1[a] += colors[i][a];
            }
        }
        entry.2 += 1;
    }
    let points = sums
        .iter()
        .map(|(s, _, n)| {
            let n = *n as f64;
            Point3::new(s[0] / n, s[1] / n, s[2] / n)
        })
        .collect();
    let colors = cloud.colors.as_ref().map(|_| {
        sums.iter()
            .map(|(_, c, n)| {
                let n = *n as f64;
                [c[0] / n, c[1] / n, c[2] / n]
            })
            .collect()
    });
    Ok(PointCloud { points, colors })
}

/// Adds i.i.d. zero-mean Gaussian noise to every coordinate.
pub fn augment_noise(cloud: &PointCloud, sigma: f64, seed: u64) -> Result<PointCloud> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid("noise sigma must be non-negative"));
    }
    if sigma == 0.0 {
        return Ok(cloud.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = cloud
        .points
        .iter()
        .map(|p| {
            Point3::new(
                p.x + normal.sample(&mut rng),
                p.y + normal.sample(&mut rng),
                p.z + normal.sample(&mut rng),
            )
        })
        .collect();
    Ok(PointCloud {
        points,
        colors: cloud.colors.clone(),
    })
}
