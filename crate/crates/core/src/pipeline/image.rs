use crate::error::{Error, Result};
use crate::geometry::{unproject, CameraIntrinsics, Pixel, Point3};

/// Row-major depth grid in meters with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    depths: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthImage {
    /// Non-positive or non-finite depths are marked invalid and stored as 0.
    pub fn from_depths(width: usize, height: usize, depths: Vec<f64>) -> Result<Self> {
        if depths.len() != width * height {
            return Err(Error::invalid(format!(
                "depth grid has {} values, expected {}x{}",
                depths.len(),
                width,
                height
            )));
        }
        let valid: Vec<bool> = depths.iter().map(|d| d.is_finite() && *d > 0.0).collect();
        let depths = depths
            .into_iter()
            .zip(&valid)
            .map(|(d, &ok)| if ok { d } else { 0.0 })
            .collect();
        Ok(Self {
            width,
            height,
            depths,
            valid,
        })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depths: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }

    pub fn depth(&self, index: usize) -> Option<f64> {
        self.valid[index].then_some(self.depths[index])
    }

    pub fn set(&mut self, index: usize, depth: f64) {
        let ok = depth.is_finite() && depth > 0.0;
        self.valid[index] = ok;
        self.depths[index] = if ok { depth } else { 0.0 };
    }

    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn valid_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.valid
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.then_some(i))
    }

    /// Γ: camera-frame point of pixel `index`, or `None` without valid depth.
    pub fn lift(&self, index: usize, k: &CameraIntrinsics) -> Option<Point3> {
        let d = self.depth(index)?;
        unproject(Pixel::from_index(index, self.width), d, k).ok()
    }
}

/// Dense HWC image of reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::invalid("image data length does not match its shape"));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn pixel_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.data[index * self.channels..(index + 1) * self.channels]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.data.iter().map(|v| (v - m).powi(2)).sum::<f64>() / self.data.len().max(1) as f64)
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Standardized {
    pub image: Image,
    /// Set for zero-variance inputs, which map to an all-zero image.
    pub degenerate: bool,
}

/// Zero mean, unit (population) standard deviation over all pixels and
/// channels.
pub fn standardize_image(image: &Image) -> Result<Standardized> {
    if image.data.is_empty() {
        return Err(Error::invalid("cannot standardize an empty image"));
    }
    let mean = image.mean();
    let std = image.std();
    if !(std > 1e-12) {
        return Ok(Standardized {
            image: Image::zeros(image.width, image.height, image.channels),
            degenerate: true,
        });
    }
    let data = image.data.iter().map(|v| (v - mean) / std).collect();
    Ok(Standardized {
        image: Image {
            data,
            ..*image
        },
        degenerate: false,
    })
}
