//! Pinhole camera model, rigid transforms, and the pixel/point mappings
//! between them.
//!
//! Conventions: pixels are addressed as `(u, v)` with `u` the column and `v`
//! the row, origin at the top-left pixel center. Depth is the camera-frame
//! `z` coordinate, not the ray length. No lens distortion is modelled.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = nalgebra::Point3<f64>;

const ORTHO_TOL: f64 = 1e-9;

/// Image-plane location in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    /// Pixel center of a row-major flat index.
    pub fn from_index(index: usize, width: usize) -> Self {
        Self {
            u: (index % width) as f64,
            v: (index / width) as f64,
        }
    }

    pub fn distance(&self, other: &Pixel) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

/// Pinhole intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Intrinsics with the principal point at the image center and the given
    /// horizontal field of view (radians).
    pub fn centered(width: usize, height: usize, hfov: f64) -> Result<Self> {
        let f = 0.5 * width as f64 / (0.5 * hfov).tan();
        Self::new(
            f,
            f,
            (width as f64 - 1.0) * 0.5,
            (height as f64 - 1.0) * 0.5,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(Error::invalid("cx must lie in [0, width)"));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::invalid("cy must lie in [0, height)"));
        }
        Ok(())
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn contains(&self, p: &Pixel) -> bool {
        p.u >= 0.0 && p.v >= 0.0 && p.u < self.width as f64 && p.v < self.height as f64
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.fx, 0.0, self.cx, //
            0.0, self.fy, self.cy, //
            0.0, 0.0, 1.0,
        )
    }
}

/// Result of projecting a camera-frame point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Pixel,
    /// Set when the point has `z <= 0`; `pixel` is meaningless then.
    pub behind_camera: bool,
}

/// Lifts a pixel with known depth into the camera frame.
pub fn unproject(p: Pixel, depth: f64, k: &CameraIntrinsics) -> Result<Point3> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(Error::invalid(format!("depth must be positive, got {depth}")));
    }
    Ok(Point3::new(
        (p.u - k.cx) * depth / k.fx,
        (p.v - k.cy) * depth / k.fy,
        depth,
    ))
}

pub fn project(x: &Point3, k: &CameraIntrinsics) -> Projection {
    if x.z <= 0.0 {
        return Projection {
            pixel: Pixel::new(f64::NAN, f64::NAN),
            behind_camera: true,
        };
    }
    Projection {
        pixel: Pixel::new(k.fx * x.x / x.z + k.cx, k.fy * x.y / x.z + k.cy),
        behind_camera: false,
    }
}

/// SE(3) element acting as `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Checked constructor: the rotation must be orthonormal with det +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho_err = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if ortho_err > ORTHO_TOL || (rotation.determinant() - 1.0).abs() > ORTHO_TOL {
            return Err(Error::invalid("rotation is not a proper orthonormal matrix"));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("translation must be finite"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Projects an arbitrary 3x3 matrix onto the closest rotation in the
    /// Frobenius norm before building the transform.
    pub fn from_approx_rotation(m: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: nearest_rotation(&m),
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation from an axis-angle vector (Rodrigues) plus translation.
    pub fn from_axis_angle(omega: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: rodrigues(&omega),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, x: &Point3) -> Point3 {
        Point3::from(self.rotation * x.coords + self.translation)
    }

    /// `compose(a, b)` applies `b` first, then `a`.
    pub fn compose(&self, b: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * b.rotation,
            translation: self.rotation * b.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self> {
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::invalid("pose matrix bottom row must be [0,0,0,1]"));
        }
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    /// Row-major 4x4 layout used in JSON documents.
    pub fn to_rows(&self) -> [[f64; 4]; 4] {
        let m = self.to_matrix();
        let mut rows = [[0.0; 4]; 4];
        for (r, row) in rows.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = m[(r, c)];
            }
        }
        rows
    }

    pub fn from_rows(rows: &[[f64; 4]; 4]) -> Result<Self> {
        let m = Matrix4::from_fn(|r, c| rows[r][c]);
        Self::from_matrix(&m)
    }

    /// Rotation angle (radians) of `self^-1 * other`.
    pub fn rotation_error(&self, other: &RigidTransform) -> f64 {
        let r = self.rotation.transpose() * other.rotation;
        ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0).acos()
    }

    pub fn translation_error(&self, other: &RigidTransform) -> f64 {
        (self.translation - other.translation).norm()
    }
}

pub fn rodrigues(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let k = skew(omega);
    if theta < 1e-12 {
        return Matrix3::identity() + k;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Matrix3::identity() + k * a + k * k * b
}

pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -w.z, w.y, //
        w.z, 0.0, -w.x, //
        -w.y, w.x, 0.0,
    )
}

/// Closest proper rotation to `m` in the Frobenius norm.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}

/// True iff `t` maps `x` in front of the camera and inside the image.
/// `t` maps the point's frame into the camera frame.
pub fn in_frustum(x: &Point3, k: &CameraIntrinsics, t: &RigidTransform) -> bool {
    let pc = t.apply(x);
    let proj = project(&pc, k);
    !proj.behind_camera && k.contains(&proj.pixel)
}

/// JSON view of a camera: intrinsics at the top level plus an optional
/// row-major pose under `"T"`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraDoc {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(rename = "T", default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<[[f64; 4]; 4]>,
}

impl CameraDoc {
    pub fn new(k: &CameraIntrinsics, pose: Option<&RigidTransform>) -> Self {
        Self {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
            pose: pose.map(|t| t.to_rows()),
        }
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
    }

    pub fn transform(&self) -> Result<Option<RigidTransform>> {
        self.pose.as_ref().map(RigidTransform::from_rows).transpose()
    }
}
