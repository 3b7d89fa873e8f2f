//! SemanticKITTI scan/label I/O and spherical range-view projection.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Bytes per point in a `.bin` scan: four little-endian f32.
pub const SCAN_RECORD_BYTES: u64 = 16;
/// Bytes per entry in a `.label` file.
pub const LABEL_RECORD_BYTES: u64 = 4;
/// `point_index` value for pixels no point projected to.
pub const NO_POINT: u32 = u32::MAX;
/// Number of input channels per pixel: x, y, z, intensity, range.
pub const CHANNELS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

impl Point {
    pub fn new(x: f32, y: f32, z: f32, intensity: f32) -> Self {
        Point { x, y, z, intensity }
    }

    pub fn range(&self) -> f64 {
        let (x, y, z) = (self.x as f64, self.y as f64, self.z as f64);
        (x * x + y * y + z * z).sqrt()
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.intensity.is_finite()
    }
}

/// One LiDAR sweep, in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        PointCloud { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Encodes the cloud in the packed `.bin` layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.points.len() * SCAN_RECORD_BYTES as usize);
        for p in &self.points {
            for v in [p.x, p.y, p.z, p.intensity] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// Vertical field of view is given as two magnitudes: above and below the horizon.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub width: usize,
    pub height: usize,
    /// Radians, magnitude.
    pub fov_up: f64,
    /// Radians, magnitude.
    pub fov_down: f64,
}

impl ProjectionConfig {
    pub fn from_degrees(
        width: usize,
        height: usize,
        fov_up_deg: f64,
        fov_down_deg: f64,
    ) -> Result<Self> {
        let cfg = ProjectionConfig {
            width,
            height,
            fov_up: fov_up_deg.to_radians(),
            fov_down: fov_down_deg.to_radians(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config(format!(
                "projection size must be positive, got {}x{}",
                self.width, self.height
            )));
        }
        if !(self.fov_up >= 0.0) || !(self.fov_down > 0.0) || !self.fov().is_finite() {
            return Err(Error::Config(format!(
                "projection fov must satisfy fov_up >= 0, fov_down > 0 (got {}, {})",
                self.fov_up, self.fov_down
            )));
        }
        Ok(())
    }

    /// Total vertical field of view.
    pub fn fov(&self) -> f64 {
        self.fov_up + self.fov_down
    }

    /// Real-valued image coordinates of a point, before rasterization.
    /// Returns `None` for a point at the sensor origin.
    pub fn continuous_coords(&self, p: &Point) -> Option<(f64, f64)> {
        let r = p.range();
        if r == 0.0 {
            return None;
        }
        let (x, y, z) = (p.x as f64, p.y as f64, p.z as f64);
        let u = 0.5 * (1.0 - y.atan2(x) / PI) * self.width as f64;
        let v = (1.0 - ((z / r).asin() + self.fov_down) / self.fov()) * self.height as f64;
        Some((u, v))
    }

    /// Pixel `(column, row)` of a point: floor, then clamp into the grid.
    pub fn pixel_of(&self, p: &Point) -> Option<(usize, usize)> {
        let (u, v) = self.continuous_coords(p)?;
        Some((clamp_floor(u, self.width), clamp_floor(v, self.height)))
    }
}

fn clamp_floor(x: f64, n: usize) -> usize {
    let f = x.floor();
    if f <= 0.0 {
        0
    } else if f >= (n - 1) as f64 {
        n - 1
    } else {
        f as usize
    }
}

/// Range-view image: `height x width` pixels of (x, y, z, intensity, r).
#[derive(Clone, Debug, PartialEq)]
pub struct RangeImage {
    width: usize,
    height: usize,
    channels: Vec<[f32; CHANNELS]>,
    point_index: Vec<u32>,
    valid_count: usize,
}

impl RangeImage {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Number of valid pixels (rows of every per-element map).
    pub fn valid_count(&self) -> usize {
        self.valid_count
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.point_index[row * self.width + col] != NO_POINT
    }

    pub fn channels_at(&self, row: usize, col: usize) -> &[f32; CHANNELS] {
        &self.channels[row * self.width + col]
    }

    /// Source point of a pixel, if any.
    pub fn point_index_at(&self, row: usize, col: usize) -> Option<usize> {
        match self.point_index[row * self.width + col] {
            NO_POINT => None,
            i => Some(i as usize),
        }
    }

    /// Flat row-major indices of valid pixels; this is the element order of
    /// every `M x K` map derived from the image.
    pub fn valid_pixels(&self) -> impl Iterator<Item = usize> + '_ {
        self.point_index
            .iter()
            .enumerate()
            .filter(|(_, &i)| i != NO_POINT)
            .map(|(p, _)| p)
    }

    pub fn flat_channels(&self) -> &[[f32; CHANNELS]] {
        &self.channels
    }

    pub fn valid_mask(&self) -> Array2<bool> {
        Array2::from_shape_fn((self.height, self.width), |(r, c)| self.is_valid(r, c))
    }

    /// Channels as an `(h, w, 5)` array.
    pub fn to_array(&self) -> Array3<f32> {
        Array3::from_shape_fn((self.height, self.width, CHANNELS), |(r, c, k)| {
            self.channels[r * self.width + c][k]
        })
    }

    /// Source point index of every valid pixel, in element order.
    pub fn element_points(&self) -> Vec<usize> {
        self.point_index
            .iter()
            .filter(|&&i| i != NO_POINT)
            .map(|&i| i as usize)
            .collect()
    }

    /// Packed little-endian f32 dump in `(h, w, 5)` order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.channels.len() * CHANNELS * 4);
        for px in &self.channels {
            for v in px {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// Reads a packed float32 `(x, y, z, intensity)` scan.
pub fn read_scan(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_scan(&bytes).map_err(|e| match e {
        DecodeError::Truncated => Error::TruncatedRecord {
            path: path.to_path_buf(),
            len: bytes.len() as u64,
            record: SCAN_RECORD_BYTES,
        },
        DecodeError::NonFinite(index) => Error::NonFinite {
            path: path.to_path_buf(),
            index,
        },
    })
}

enum DecodeError {
    Truncated,
    NonFinite(usize),
}

fn decode_scan(bytes: &[u8]) -> std::result::Result<PointCloud, DecodeError> {
    if !(bytes.len() as u64).is_multiple_of(SCAN_RECORD_BYTES) {
        return Err(DecodeError::Truncated);
    }
    let mut points = Vec::with_capacity(bytes.len() / SCAN_RECORD_BYTES as usize);
    for (index, rec) in bytes.chunks_exact(SCAN_RECORD_BYTES as usize).enumerate() {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap());
        let p = Point::new(f(0), f(1), f(2), f(3));
        if !p.is_finite() {
            return Err(DecodeError::NonFinite(index));
        }
        points.push(p);
    }
    Ok(PointCloud { points })
}

pub fn write_scan(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, cloud.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Semantic id of a packed label word: the low 16 bits.
pub fn semantic_id(word: u32) -> u32 {
    word & 0xFFFF
}

/// Reads a `.label` file and returns the semantic id of each point.
///
/// `known` is the configured id table; any other id is an error that lists
/// every offending id.
pub fn read_labels(
    path: impl AsRef<Path>,
    count: usize,
    known: impl Fn(u32) -> bool,
) -> Result<Vec<u32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if !(bytes.len() as u64).is_multiple_of(LABEL_RECORD_BYTES) {
        return Err(Error::TruncatedRecord {
            path: path.to_path_buf(),
            len: bytes.len() as u64,
            record: LABEL_RECORD_BYTES,
        });
    }
    let found = bytes.len() / LABEL_RECORD_BYTES as usize;
    if found != count {
        return Err(Error::LengthMismatch {
            expected: count,
            found,
        });
    }
    let ids: Vec<u32> = bytes
        .chunks_exact(4)
        .map(|w| semantic_id(u32::from_le_bytes(w.try_into().unwrap())))
        .collect();
    let mut unknown: Vec<u32> = ids.iter().copied().filter(|&id| !known(id)).collect();
    if !unknown.is_empty() {
        unknown.sort_unstable();
        unknown.dedup();
        return Err(Error::UnknownRawId(unknown));
    }
    Ok(ids)
}

/// Writes semantic ids with a zero instance field.
pub fn write_labels(path: impl AsRef<Path>, ids: &[u32]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(ids.len() * 4);
    for &id in ids {
        out.extend_from_slice(&(id & 0xFFFF).to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Spherical projection of a cloud into a range image.
///
/// Collisions keep the nearest point; equal ranges keep the lower point index.
pub fn project(cloud: &PointCloud, cfg: &ProjectionConfig) -> Result<RangeImage> {
    cfg.validate()?;
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let pixels: Vec<Option<(usize, f64)>> = par::map_slice(&cloud.points, |p| {
        cfg.pixel_of(p).map(|(c, r)| (r * cfg.width + c, p.range()))
    });

    let n = cfg.width * cfg.height;
    let mut best_range = vec![f64::INFINITY; n];
    let mut point_index = vec![NO_POINT; n];
    for (i, px) in pixels.iter().enumerate() {
        let Some((pixel, r)) = *px else {
            return Err(Error::ZeroRange { index: i });
        };
        let cur = point_index[pixel];
        if r < best_range[pixel] || (r == best_range[pixel] && (i as u32) < cur) {
            best_range[pixel] = r;
            point_index[pixel] = i as u32;
        }
    }

    let mut channels = vec![[0.0f32; CHANNELS]; n];
    let mut valid_count = 0;
    for (pixel, &idx) in point_index.iter().enumerate() {
        if idx == NO_POINT {
            continue;
        }
        let p = &cloud.points[idx as usize];
        channels[pixel] = [p.x, p.y, p.z, p.intensity, best_range[pixel] as f32];
        valid_count += 1;
    }
    Ok(RangeImage {
        width: cfg.width,
        height: cfg.height,
        channels,
        point_index,
        valid_count,
    })
}

/// Assigns every point the label of the pixel it projects to, including
/// points that lost a pixel collision.
pub fn backproject<T: Clone>(
    per_pixel: &Array2<T>,
    image: &RangeImage,
    cloud: &PointCloud,
    cfg: &ProjectionConfig,
) -> Result<Vec<T>> {
    let (h, w) = per_pixel.dim();
    if h != image.height || w != image.width || cfg.width != w || cfg.height != h {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", image.height, image.width),
            got: format!("{h}x{w}"),
        });
    }
    cloud
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (c, r) = cfg.pixel_of(p).ok_or(Error::ZeroRange { index: i })?;
            Ok(per_pixel[(r, c)].clone())
        })
        .collect()
}
