//! On-disk formats for fragments and correspondence sets.
//!
//! A pair directory holds `cloud.ply` (binary little-endian, float32 xyz and
//! optional uchar rgb), `image.png` (8-bit RGB), `depth.bin` (row-major
//! little-endian float32, 0 = invalid), `meta.json` and `pairs.csv`.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cloud::PointCloud;
use super::image::{DepthImage, Image};
use super::labeling::{Correspondence, CorrespondenceKind, CorrespondenceSet};
use crate::error::{Error, Result};
use crate::geometry::{CameraDoc, CameraIntrinsics, Point3, RigidTransform};

pub const CLOUD_FILE: &str = "cloud.ply";
pub const IMAGE_FILE: &str = "image.png";
pub const DEPTH_FILE: &str = "depth.bin";
pub const META_FILE: &str = "meta.json";
pub const PAIRS_FILE: &str = "pairs.csv";

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Rounds positions to float32 so that a cloud equals its PLY round trip.
pub fn quantize_cloud(cloud: &PointCloud) -> PointCloud {
    PointCloud {
        points: cloud
            .points
            .iter()
            .map(|p| Point3::new(p.x as f32 as f64, p.y as f32 as f64, p.z as f32 as f64))
            .collect(),
        colors: cloud.colors.as_ref().map(|cs| {
            cs.iter()
                .map(|c| c.map(|v| quantize_channel(v) as f64 / 255.0))
                .collect()
        }),
    }
}

pub fn quantize_channel(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ply(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::new();
    let mut header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n",
        cloud.len()
    );
    if cloud.colors.is_some() {
        header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    header.push_str("end_header\n");
    out.extend_from_slice(header.as_bytes());
    for (i, p) in cloud.points.iter().enumerate() {
        for v in [p.x, p.y, p.z] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        if let Some(colors) = &cloud.colors {
            out.extend(colors[i].iter().map(|&c| quantize_channel(c)));
        }
    }
    out
}

#[derive(Clone, Copy)]
enum PlyType {
    U8,
    F32,
    F64,
}

impl PlyType {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "uchar" | "uint8" => Ok(PlyType::U8),
            "float" | "float32" => Ok(PlyType::F32),
            "double" | "float64" => Ok(PlyType::F64),
            other => Err(Error::Data(format!("unsupported PLY property type `{other}`"))),
        }
    }

    fn size(self) -> usize {
        match self {
            PlyType::U8 => 1,
            PlyType::F32 => 4,
            PlyType::F64 => 8,
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            PlyType::U8 => b[0] as f64,
            PlyType::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PlyType::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

pub fn decode_ply(bytes: &[u8]) -> Result<PointCloud> {
    let mut reader = BufReader::new(bytes);
    let mut line = String::new();
    let mut count = None;
    let mut props: Vec<(String, PlyType)> = Vec::new();
    let mut in_vertex = false;
    loop {
        line.clear();
        let n = reader
            .read_line(&mut line)
            .map_err(|e| Error::Data(format!("bad PLY header: {e}")))?;
        if n == 0 {
            return Err(Error::Data("PLY header not terminated".into()));
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] if *fmt != "binary_little_endian" => {
                return Err(Error::Data(format!("unsupported PLY format `{fmt}`")));
            }
            ["element", "vertex", n] => {
                count = Some(
                    n.parse::<usize>()
                        .map_err(|_| Error::Data("bad vertex count".into()))?,
                );
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", ty, name] if in_vertex => {
                props.push((name.to_string(), PlyType::parse(ty)?));
            }
            _ => {}
        }
    }
    let count = count.ok_or_else(|| Error::Data("PLY has no vertex element".into()))?;
    let stride: usize = props.iter().map(|(_, t)| t.size()).sum();
    let mut body = Vec::new();
    reader
        .read_to_end(&mut body)
        .map_err(|e| Error::Data(e.to_string()))?;
    if body.len() < stride * count {
        return Err(Error::Data("PLY body truncated".into()));
    }
    let find = |name: &str| {
        let mut off = 0;
        for (n, t) in &props {
            if n == name {
                return Some((off, *t));
            }
            off += t.size();
        }
        None
    };
    let (xo, yo, zo) = match (find("x"), find("y"), find("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(Error::Data("PLY lacks x/y/z".into())),
    };
    let rgb = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };
    let mut points = Vec::with_capacity(count);
    let mut colors = rgb.map(|_| Vec::with_capacity(count));
    for rec in body.chunks_exact(stride).take(count) {
        let get = |(o, t): (usize, PlyType)| t.read(&rec[o..]);
        points.push(Point3::new(get(xo), get(yo), get(zo)));
        if let (Some(rgb), Some(colors)) = (rgb, colors.as_mut()) {
            colors.push(rgb.map(|c| get(c) / 255.0));
        }
    }
    PointCloud::new(points, colors).map_err(|e| Error::Data(e.to_string()))
}

pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_file(path, &encode_ply(cloud))
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    decode_ply(&read_file(path)?)
}

pub fn write_depth_bin(path: &Path, depth: &DepthImage) -> Result<()> {
    let bytes: Vec<u8> = depth
        .depths()
        .iter()
        .flat_map(|d| (*d as f32).to_le_bytes())
        .collect();
    write_file(path, &bytes)
}

pub fn read_depth_bin(path: &Path, width: usize, height: usize) -> Result<DepthImage> {
    let bytes = read_file(path)?;
    if bytes.len() != width * height * 4 {
        return Err(Error::Data(format!(
            "{} has {} bytes, expected {}",
            path.display(),
            bytes.len(),
            width * height * 4
        )));
    }
    let depths = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    DepthImage::from_depths(width, height, depths)
}

pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::invalid("PNG export expects an RGB image"));
    }
    let buf: Vec<u8> = img.data.iter().map(|&v| quantize_channel(v)).collect();
    let rgb = image::RgbImage::from_raw(img.width as u32, img.height as u32, buf)
        .ok_or_else(|| Error::invalid("image buffer size mismatch"))?;
    rgb.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn read_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Image::new(w as usize, h as usize, 3, data)
}

pub fn write_pairs_csv(path: &Path, set: &CorrespondenceSet) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "pixel_index,point_index,distance").unwrap();
    for c in &set.pairs {
        writeln!(out, "{},{},{:.9}", c.pixel, c.point, c.distance).unwrap();
    }
    write_file(path, &out)
}

pub fn read_pairs_csv(path: &Path, kind: CorrespondenceKind) -> Result<CorrespondenceSet> {
    let text = String::from_utf8(read_file(path)?)
        .map_err(|_| Error::Data(format!("{} is not UTF-8", path.display())))?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Data(format!("{}:{}: malformed row", path.display(), lineno + 1));
        if f.len() != 3 {
            return Err(bad());
        }
        pairs.push(Correspondence {
            pixel: f[0].trim().parse().map_err(|_| bad())?,
            point: f[1].trim().parse().map_err(|_| bad())?,
            distance: f[2].trim().parse().map_err(|_| bad())?,
        });
    }
    Ok(CorrespondenceSet::new(kind, pairs))
}

/// `meta.json` of a pair directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairMeta {
    #[serde(flatten)]
    pub camera: CameraDoc,
    pub eta: f64,
    pub voxel_size: f64,
    /// Frame the cloud is expressed in; `T` maps camera to this frame.
    pub cloud_frame: String,
    pub num_points: usize,
    pub num_correspondences: usize,
    pub usable: bool,
}

/// Everything stored for one image/cloud pair.
#[derive(Debug, Clone)]
pub struct PairData {
    pub name: String,
    pub cloud: PointCloud,
    pub image: Image,
    pub depth: DepthImage,
    pub intrinsics: CameraIntrinsics,
    /// Camera-to-cloud transform.
    pub pose: RigidTransform,
    pub correspondences: CorrespondenceSet,
    pub meta: PairMeta,
}

pub fn write_pair_dir(dir: &Path, pair: &PairData) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_ply(&dir.join(CLOUD_FILE), &pair.cloud)?;
    write_png(&dir.join(IMAGE_FILE), &pair.image)?;
    write_depth_bin(&dir.join(DEPTH_FILE), &pair.depth)?;
    write_pairs_csv(&dir.join(PAIRS_FILE), &pair.correspondences)?;
    let mut meta = serde_json::to_vec_pretty(&pair.meta)?;
    meta.push(b'\n');
    write_file(&dir.join(META_FILE), &meta)
}

pub fn read_pair_dir(dir: &Path) -> Result<PairData> {
    for f in [CLOUD_FILE, IMAGE_FILE, DEPTH_FILE, META_FILE, PAIRS_FILE] {
        if !dir.join(f).is_file() {
            return Err(Error::Data(format!("{} is missing {f}", dir.display())));
        }
    }
    let meta: PairMeta = serde_json::from_slice(&read_file(&dir.join(META_FILE))?)?;
    let intrinsics = meta.camera.intrinsics()?;
    let pose = meta
        .camera
        .transform()?
        .ok_or_else(|| Error::Data(format!("{}: meta.json lacks pose T", dir.display())))?;
    let cloud = read_ply(&dir.join(CLOUD_FILE))?;
    let image = read_png(&dir.join(IMAGE_FILE))?;
    if image.width != intrinsics.width || image.height != intrinsics.height {
        return Err(Error::Data(format!("{}: image size disagrees with meta", dir.display())));
    }
    let depth = read_depth_bin(&dir.join(DEPTH_FILE), intrinsics.width, intrinsics.height)?;
    let correspondences = read_pairs_csv(&dir.join(PAIRS_FILE), CorrespondenceKind::GroundTruth)?;
    correspondences.validate(intrinsics.num_pixels(), cloud.len())?;
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(PairData {
        name,
        cloud,
        image,
        depth,
        intrinsics,
        pose,
        correspondences,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn ply_round_trip(pts in prop::collection::vec((prop::array::uniform3(-10.0f64..10.0), prop::array::uniform3(0u8..=255)), 0..50)) {
            let cloud = PointCloud::new(
                pts.iter().map(|(p, _)| Point3::new(p[0], p[1], p[2])).collect(),
                Some(pts.iter().map(|(_, c)| c.map(|v| v as f64 / 255.0)).collect()),
            ).unwrap();
            let q = quantize_cloud(&cloud);
            let back = decode_ply(&encode_ply(&cloud)).unwrap();
            prop_assert_eq!(back.points, q.points);
            let (bc, qc) = (back.colors.unwrap(), q.colors.unwrap());
            for (a, b) in bc.iter().zip(&qc) {
                for i in 0..3 {
                    prop_assert!((a[i] - b[i]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn ply_without_colors() {
        let cloud = PointCloud::new(vec![Point3::new(0.5, -0.25, 2.0)], None).unwrap();
        let back = decode_ply(&encode_ply(&cloud)).unwrap();
        assert_eq!(back, cloud);
    }

    #[test]
    fn rejects_ascii_ply() {
        let txt = b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n";
        assert!(decode_ply(txt).is_err());
    }
}
