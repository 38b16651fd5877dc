//! Canonical in-memory rasters, keypoints and latent tensors, plus their
//! file formats.
//!
//! Images and masks are 8-bit PNGs. Keypoints use the OpenPose JSON layout
//! with the 18-joint body scheme. Latent tensors use a small binary format:
//!
//! ```text
//! "TRYW0001"            8 bytes magic
//! rank        u32 LE    always 3
//! channels    u32 LE
//! height      u32 LE
//! width       u32 LE
//! data        f32 LE    channels * height * width values, channel-major
//! ```

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Magic prefix of the latent tensor file format.
pub const TENSOR_MAGIC: &[u8; 8] = b"TRYW0001";

/// Dense row-major raster with 1 or 3 channels and values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImagePlane {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "image channels must be 1 or 3, got {channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Dimension(format!(
                "image data length {} != {width}x{height}x{channels}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("image value {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, color: &[f32]) -> Self {
        let channels = color.len();
        assert!(channels == 1 || channels == 3, "1 or 3 channels");
        let mut data = Vec::with_capacity(width * height * channels);
        for _ in 0..width * height {
            data.extend_from_slice(color);
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    /// Builds a plane from a per-pixel closure. Values are clamped to `[0, 1]`.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        assert!(channels == 1 || channels == 3, "1 or 3 channels");
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c).clamp(0.0, 1.0));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v.clamp(0.0, 1.0);
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, px: &[f32]) {
        let i = (y * self.width + x) * self.channels;
        for (dst, &v) in self.data[i..i + self.channels].iter_mut().zip(px) {
            *dst = v.clamp(0.0, 1.0);
        }
    }

    /// Returns a 3-channel copy; grayscale values are replicated.
    pub fn to_rgb(&self) -> ImagePlane {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        ImagePlane {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }
}

/// Binary occupancy raster; every value is 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskPlane {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl MaskPlane {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![1; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(u8::from(f(x, y)));
            }
        }
        Self { width, height, data }
    }

    pub fn from_bits(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "mask data length {} != {width}x{height}",
                data.len()
            )));
        }
        if data.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("mask values must be 0 or 1".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&b| b == 0)
    }

    fn zip_with(&self, other: &MaskPlane, op: impl Fn(u8, u8) -> u8) -> Result<MaskPlane> {
        if self.dims() != other.dims() {
            return Err(Error::Dimension(format!(
                "mask {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| op(a, b)).collect();
        Ok(MaskPlane {
            width: self.width,
            height: self.height,
            data,
        })
    }

    pub fn and(&self, other: &MaskPlane) -> Result<MaskPlane> {
        self.zip_with(other, |a, b| a & b)
    }

    pub fn or(&self, other: &MaskPlane) -> Result<MaskPlane> {
        self.zip_with(other, |a, b| a | b)
    }

    /// Pixels set here but not in `other`.
    pub fn minus(&self, other: &MaskPlane) -> Result<MaskPlane> {
        self.zip_with(other, |a, b| a & (1 - b))
    }

    pub fn not(&self) -> MaskPlane {
        MaskPlane {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&b| 1 - b).collect(),
        }
    }

    /// Disk dilation with the given pixel radius.
    pub fn dilate(&self, radius: usize) -> MaskPlane {
        if radius == 0 {
            return self.clone();
        }
        let r = radius as isize;
        let offsets: Vec<(isize, isize)> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
            .filter(|(dx, dy)| dx * dx + dy * dy <= r * r)
            .collect();
        let (w, h) = (self.width as isize, self.height as isize);
        let mut out = MaskPlane::zeros(self.width, self.height);
        for y in 0..h {
            for x in 0..w {
                if !self.get(x as usize, y as usize) {
                    continue;
                }
                for &(dx, dy) in &offsets {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx >= 0 && ny >= 0 && nx < w && ny < h {
                        out.data[(ny * w + nx) as usize] = 1;
                    }
                }
            }
        }
        out
    }

    /// Mask as a grayscale image (0 or 1).
    pub fn to_image(&self) -> ImagePlane {
        ImagePlane {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.iter().map(|&b| f32::from(b)).collect(),
        }
    }
}

/// The 18 joints of the OpenPose COCO body layout, in file order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(usize)]
pub enum Joint {
    Nose = 0,
    Neck,
    RightShoulder,
    RightElbow,
    RightWrist,
    LeftShoulder,
    LeftElbow,
    LeftWrist,
    RightHip,
    RightKnee,
    RightAnkle,
    LeftHip,
    LeftKnee,
    LeftAnkle,
    RightEye,
    LeftEye,
    RightEar,
    LeftEar,
}

pub const JOINT_COUNT: usize = 18;

/// Identifier of the only keypoint layout understood by the loader.
pub const KEYPOINT_LAYOUT: &str = "openpose-coco18";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

impl Keypoint {
    pub const ABSENT: Keypoint = Keypoint {
        x: 0.0,
        y: 0.0,
        confidence: 0.0,
    };

    pub fn is_present(&self) -> bool {
        self.confidence > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    joints: [Keypoint; JOINT_COUNT],
}

impl Default for KeypointSet {
    fn default() -> Self {
        Self {
            joints: [Keypoint::ABSENT; JOINT_COUNT],
        }
    }
}

impl KeypointSet {
    pub fn new(joints: [Keypoint; JOINT_COUNT]) -> Self {
        Self { joints }
    }

    pub fn layout(&self) -> &'static str {
        KEYPOINT_LAYOUT
    }

    pub fn joints(&self) -> &[Keypoint; JOINT_COUNT] {
        &self.joints
    }

    pub fn get(&self, joint: Joint) -> Option<Keypoint> {
        let kp = self.joints[joint as usize];
        kp.is_present().then_some(kp)
    }

    pub fn set(&mut self, joint: Joint, x: f64, y: f64, confidence: f64) {
        self.joints[joint as usize] = Keypoint { x, y, confidence };
    }

    /// Marks joints outside `[0, width) x [0, height)` as absent.
    pub fn restrict_to_bounds(&mut self, width: usize, height: usize) {
        for kp in &mut self.joints {
            let inside = kp.x >= 0.0 && kp.y >= 0.0 && kp.x < width as f64 && kp.y < height as f64;
            if !inside || !kp.x.is_finite() || !kp.y.is_finite() {
                *kp = Keypoint::ABSENT;
            }
        }
    }

    /// Applies `f` to every present joint's coordinates.
    pub fn map_points(&self, f: impl Fn(f64, f64) -> (f64, f64)) -> KeypointSet {
        let mut out = self.clone();
        for kp in out.joints.iter_mut().filter(|kp| kp.is_present()) {
            let (x, y) = f(kp.x, kp.y);
            kp.x = x;
            kp.y = y;
        }
        out
    }
}

/// Per-pixel part labels from a human parser.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsingPlane {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl ParsingPlane {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::Dimension(format!(
                "parsing length {} != {width}x{height}",
                labels.len()
            )));
        }
        Ok(Self { width, height, labels })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut labels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                labels.push(f(x, y));
            }
        }
        Self { width, height, labels }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Mask of pixels whose label is in `set`.
    pub fn mask_of(&self, set: &[u8]) -> MaskPlane {
        MaskPlane::from_fn(self.width, self.height, |x, y| set.contains(&self.get(x, y)))
    }
}

/// Dense body-surface coordinates: part index (0 = background) and `(u, v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct IuvPlane {
    width: usize,
    height: usize,
    part_index: Vec<u8>,
    u: Vec<f32>,
    v: Vec<f32>,
}

impl IuvPlane {
    pub fn new(width: usize, height: usize, part_index: Vec<u8>, u: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        let n = width * height;
        if part_index.len() != n || u.len() != n || v.len() != n {
            return Err(Error::Dimension(format!("IUV planes must all have {n} entries")));
        }
        // u, v carry no meaning on background
        let mut u = u;
        let mut v = v;
        for i in 0..n {
            if part_index[i] == 0 {
                u[i] = 0.0;
                v[i] = 0.0;
            }
        }
        Ok(Self {
            width,
            height,
            part_index,
            u,
            v,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn part(&self, x: usize, y: usize) -> u8 {
        self.part_index[y * self.width + x]
    }

    #[inline]
    pub fn uv(&self, x: usize, y: usize) -> (f32, f32) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    /// Foreground human mask (`part_index > 0`).
    pub fn foreground(&self) -> MaskPlane {
        MaskPlane::from_fn(self.width, self.height, |x, y| self.part(x, y) > 0)
    }
}

/// Shape of a latent tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentGeometry {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Channel-major `channels x height x width` tensor of finite `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    geometry: LatentGeometry,
    data: Vec<f32>,
}

impl LatentTensor {
    pub fn new(geometry: LatentGeometry, data: Vec<f32>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::Dimension(format!(
                "tensor data length {} != {}x{}x{}",
                data.len(),
                geometry.channels,
                geometry.height,
                geometry.width
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("tensor contains non-finite values".into()));
        }
        Ok(Self { geometry, data })
    }

    pub fn zeros(geometry: LatentGeometry) -> Self {
        Self {
            geometry,
            data: vec![0.0; geometry.len()],
        }
    }

    pub fn filled(geometry: LatentGeometry, value: f32) -> Self {
        Self {
            geometry,
            data: vec![value; geometry.len()],
        }
    }

    pub fn from_fn(geometry: LatentGeometry, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(geometry.len());
        for c in 0..geometry.channels {
            for y in 0..geometry.height {
                for x in 0..geometry.width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { geometry, data }
    }

    pub fn geometry(&self) -> LatentGeometry {
        self.geometry
    }

    pub fn channels(&self) -> usize {
        self.geometry.channels
    }

    pub fn height(&self) -> usize {
        self.geometry.height
    }

    pub fn width(&self) -> usize {
        self.geometry.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        let g = self.geometry;
        self.data[(c * g.height + y) * g.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.geometry.height * self.geometry.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Flattened inner product, accumulated in `f64`.
    pub fn dot(&self, other: &LatentTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn sub(&self, other: &LatentTensor) -> LatentTensor {
        LatentTensor {
            geometry: self.geometry,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &LatentTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).abs())
            .fold(0.0, f64::max)
    }

    /// Serializes in the `TRYW0001` format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let g = self.geometry;
        let mut out = Vec::with_capacity(24 + 4 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&3u32.to_le_bytes());
        for d in [g.channels, g.height, g.width] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&floats_to_le_bytes(&self.data));
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != TENSOR_MAGIC {
            return Err(Error::format(origin, "bad tensor magic"));
        }
        let rank = read_u32(bytes, 8);
        if rank != 3 {
            return Err(Error::format(origin, format!("tensor rank {rank} != 3")));
        }
        let header = 12 + 4 * 3;
        if bytes.len() < header {
            return Err(Error::format(origin, "truncated tensor header"));
        }
        let geometry = LatentGeometry::new(
            read_u32(bytes, 12) as usize,
            read_u32(bytes, 16) as usize,
            read_u32(bytes, 20) as usize,
        );
        let expected = header + 4 * geometry.len();
        if bytes.len() != expected {
            return Err(Error::format(
                origin,
                format!(
                    "tensor payload is {} bytes, expected {}",
                    bytes.len() - header,
                    expected - header
                ),
            ));
        }
        let data = le_bytes_to_floats(&bytes[header..]);
        LatentTensor::new(geometry, data).map_err(|e| Error::format(origin, e.to_string()))
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

pub(crate) fn floats_to_le_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn le_bytes_to_floats(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect()
}

fn read_png(path: &Path) -> Result<DynamicImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let reader = ImageReader::with_format(Cursor::new(bytes), ImageFormat::Png);
    reader
        .decode()
        .map_err(|e| Error::format(path, format!("not a readable PNG: {e}")))
}

/// Loads an 8-bit grayscale or RGB PNG; each sample `s` becomes `s / 255`.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImagePlane> {
    let path = path.as_ref();
    let img = read_png(path)?;
    let (width, height, channels, raw) = match img {
        DynamicImage::ImageLuma8(buf) => (buf.width(), buf.height(), 1, buf.into_raw()),
        DynamicImage::ImageRgb8(buf) => (buf.width(), buf.height(), 3, buf.into_raw()),
        other => {
            return Err(Error::format(
                path,
                format!("unsupported color type {:?}", other.color()),
            ))
        }
    };
    let data = raw.into_iter().map(|s| f32::from(s) / 255.0).collect();
    ImagePlane::new(width as usize, height as usize, channels, data)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_png(path: &Path, width: usize, height: usize, channels: usize, raw: Vec<u8>) -> Result<()> {
    let color = if channels == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    image::save_buffer_with_format(path, &raw, width as u32, height as u32, color, ImageFormat::Png).map_err(
        |e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::format(path, other.to_string()),
        },
    )
}

/// Writes an 8-bit PNG, rounding each value to the nearest of 256 levels.
pub fn save_image(img: &ImagePlane, path: impl AsRef<Path>) -> Result<()> {
    let raw = img.data.iter().map(|&v| quantize(v)).collect();
    write_png(path.as_ref(), img.width, img.height, img.channels, raw)
}

/// Default binarization threshold for masks.
pub const DEFAULT_MASK_THRESHOLD: f32 = 0.5;

/// Loads a grayscale PNG as a mask: a pixel is set iff `value / 255 >= threshold`.
pub fn load_mask(path: impl AsRef<Path>, threshold: f32) -> Result<MaskPlane> {
    let path = path.as_ref();
    let img = load_image(path)?;
    if img.channels != 1 {
        return Err(Error::format(path, "mask must be a grayscale PNG"));
    }
    let data = img.data.iter().map(|&v| u8::from(v >= threshold)).collect();
    Ok(MaskPlane {
        width: img.width,
        height: img.height,
        data,
    })
}

/// Writes a mask as a grayscale PNG with values 0 and 255.
pub fn save_mask(mask: &MaskPlane, path: impl AsRef<Path>) -> Result<()> {
    let raw = mask.data.iter().map(|&b| b * 255).collect();
    write_png(path.as_ref(), mask.width, mask.height, 1, raw)
}

/// Loads a grayscale label map; every label must appear in `vocabulary`.
pub fn load_parsing(path: impl AsRef<Path>, vocabulary: &[u8]) -> Result<ParsingPlane> {
    let path = path.as_ref();
    let img = read_png(path)?;
    let buf = match img {
        DynamicImage::ImageLuma8(buf) => buf,
        other => {
            return Err(Error::format(
                path,
                format!("parsing map must be 8-bit grayscale, got {:?}", other.color()),
            ))
        }
    };
    let (width, height) = (buf.width() as usize, buf.height() as usize);
    let labels = buf.into_raw();
    if let Some(bad) = labels.iter().find(|l| !vocabulary.contains(l)) {
        return Err(Error::format(
            path,
            format!("label {bad} is not in the declared vocabulary"),
        ));
    }
    ParsingPlane::new(width, height, labels)
}

pub fn save_parsing(parsing: &ParsingPlane, path: impl AsRef<Path>) -> Result<()> {
    write_png(path.as_ref(), parsing.width, parsing.height, 1, parsing.labels.clone())
}

/// Paths of the three 8-bit planes making up an IUV map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IuvPaths {
    pub index: std::path::PathBuf,
    pub u: std::path::PathBuf,
    pub v: std::path::PathBuf,
}

pub fn load_iuv(paths: &IuvPaths) -> Result<IuvPlane> {
    let index_img = read_png(&paths.index)?;
    let index = match index_img {
        DynamicImage::ImageLuma8(buf) => buf,
        _ => return Err(Error::format(&paths.index, "IUV index must be 8-bit grayscale")),
    };
    let u = load_image(&paths.u)?;
    let v = load_image(&paths.v)?;
    let (w, h) = (index.width() as usize, index.height() as usize);
    for (img, p) in [(&u, &paths.u), (&v, &paths.v)] {
        if img.channels != 1 || img.dims() != (w, h) {
            return Err(Error::format(p, "IUV u/v planes must be grayscale and aligned"));
        }
    }
    IuvPlane::new(w, h, index.into_raw(), u.data, v.data)
}

pub fn save_iuv(iuv: &IuvPlane, paths: &IuvPaths) -> Result<()> {
    write_png(&paths.index, iuv.width, iuv.height, 1, iuv.part_index.clone())?;
    let u = iuv.u.iter().map(|&x| quantize(x)).collect();
    write_png(&paths.u, iuv.width, iuv.height, 1, u)?;
    let v = iuv.v.iter().map(|&x| quantize(x)).collect();
    write_png(&paths.v, iuv.width, iuv.height, 1, v)
}

#[derive(Debug, Serialize, Deserialize)]
struct PoseDocument {
    #[serde(default)]
    version: Option<f64>,
    people: Vec<PosePerson>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PosePerson {
    pose_keypoints_2d: Vec<f64>,
}

/// Loads the first person of an OpenPose JSON document. An empty `people`
/// array yields a set with every joint absent.
pub fn load_keypoints(path: impl AsRef<Path>) -> Result<KeypointSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: PoseDocument = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    let Some(person) = doc.people.first() else {
        return Ok(KeypointSet::default());
    };
    let flat = &person.pose_keypoints_2d;
    if flat.len() != 3 * JOINT_COUNT {
        return Err(Error::format(
            path,
            format!(
                "pose_keypoints_2d has {} values, expected {}",
                flat.len(),
                3 * JOINT_COUNT
            ),
        ));
    }
    let mut joints = [Keypoint::ABSENT; JOINT_COUNT];
    for (kp, chunk) in joints.iter_mut().zip(flat.chunks_exact(3)) {
        let candidate = Keypoint {
            x: chunk[0],
            y: chunk[1],
            confidence: chunk[2],
        };
        if candidate.is_present() {
            *kp = candidate;
        }
    }
    Ok(KeypointSet { joints })
}

pub fn save_keypoints(kp: &KeypointSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let flat = kp.joints.iter().flat_map(|j| [j.x, j.y, j.confidence]).collect();
    let doc = PoseDocument {
        version: Some(1.3),
        people: vec![PosePerson {
            pose_keypoints_2d: flat,
        }],
    };
    let text = serde_json::to_string_pretty(&doc).expect("keypoints serialize");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<LatentTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    LatentTensor::from_bytes(&bytes, path)
}

pub fn save_tensor(t: &LatentTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, t.to_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_gray(path: &Path, w: u32, h: u32, raw: &[u8]) {
        image::save_buffer_with_format(path, raw, w, h, image::ExtendedColorType::L8, ImageFormat::Png).unwrap();
    }

    fn write_rgb(path: &Path, w: u32, h: u32, raw: &[u8]) {
        image::save_buffer_with_format(path, raw, w, h, image::ExtendedColorType::Rgb8, ImageFormat::Png).unwrap();
    }

    #[test]
    fn white_and_black_pixels_hit_the_scale_endpoints() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.png");
        write_rgb(&p, 1, 1, &[255, 255, 255]);
        let img = load_image(&p).unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (1, 1, 3));
        assert_eq!(img.data(), &[1.0, 1.0, 1.0]);

        write_rgb(&p, 1, 1, &[0, 0, 0]);
        assert!(load_image(&p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grayscale_samples_are_divided_by_255() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        write_gray(&p, 2, 2, &[0, 51, 102, 255]);
        let img = load_image(&p).unwrap();
        assert_eq!(img.channels(), 1);
        assert_eq!(img.data(), &[0.0, 0.2, 0.4, 1.0]);
    }

    #[test]
    fn sixteen_bit_png_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("deep.png");
        let raw: Vec<u8> = vec![0, 1, 2, 3];
        image::save_buffer_with_format(&p, &raw, 2, 1, image::ExtendedColorType::L16, ImageFormat::Png).unwrap();
        assert!(matches!(load_image(&p), Err(Error::Format { .. })));
        assert!(matches!(
            load_image(dir.path().join("missing.png")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn mask_threshold_splits_127_and_128() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        write_gray(&p, 2, 1, &[127, 128]);
        let m = load_mask(&p, DEFAULT_MASK_THRESHOLD).unwrap();
        assert_eq!(m.data(), &[0, 1]);

        write_gray(&p, 2, 2, &[255; 4]);
        assert_eq!(load_mask(&p, 0.5).unwrap(), MaskPlane::ones(2, 2));
        write_gray(&p, 2, 2, &[0; 4]);
        assert_eq!(load_mask(&p, 0.5).unwrap(), MaskPlane::zeros(2, 2));
    }

    #[test]
    fn keypoints_parse_presence_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.json");
        let mut flat = vec![0.0; 54];
        fs::write(&p, format!(r#"{{"people":[{{"pose_keypoints_2d":{flat:?}}}]}}"#)).unwrap();
        let kp = load_keypoints(&p).unwrap();
        assert!(kp.joints().iter().all(|j| !j.is_present()));

        flat[0] = 10.0;
        flat[1] = 20.0;
        flat[2] = 0.9;
        fs::write(&p, format!(r#"{{"people":[{{"pose_keypoints_2d":{flat:?}}}]}}"#)).unwrap();
        let kp = load_keypoints(&p).unwrap();
        let nose = kp.get(Joint::Nose).unwrap();
        assert_eq!((nose.x, nose.y, nose.confidence), (10.0, 20.0, 0.9));
        assert!(kp.get(Joint::Neck).is_none());

        let q = dir.path().join("k2.json");
        save_keypoints(&kp, &q).unwrap();
        assert_eq!(load_keypoints(&q).unwrap(), kp);
    }

    #[test]
    fn keypoints_with_wrong_arity_or_bad_json_fail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("k.json");
        fs::write(&p, r#"{"people":[{"pose_keypoints_2d":[1,2,3]}]}"#).unwrap();
        assert!(matches!(load_keypoints(&p), Err(Error::Format { .. })));
        fs::write(&p, "{not json").unwrap();
        assert!(matches!(load_keypoints(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn unit_tensor_file_is_28_bytes() {
        // 8 magic + 4 rank + 3 * 4 dims + 1 * 4 payload
        let t = LatentTensor::zeros(LatentGeometry::new(1, 1, 1));
        let bytes = t.to_bytes();
        assert_eq!(bytes.len(), 28);
        assert_eq!(&bytes[..8], b"TRYW0001");
    }

    #[test]
    fn tensor_rejects_bad_magic_rank_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tryw");
        let t = LatentTensor::filled(LatentGeometry::new(2, 2, 2), 1.5);
        let good = t.to_bytes();

        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&p, &bad).unwrap();
        assert!(matches!(load_tensor(&p), Err(Error::Format { .. })));

        let mut bad = good.clone();
        bad[8] = 2;
        fs::write(&p, &bad).unwrap();
        assert!(matches!(load_tensor(&p), Err(Error::Format { .. })));

        fs::write(&p, &good[..good.len() - 1]).unwrap();
        assert!(matches!(load_tensor(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn parsing_outside_vocabulary_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.png");
        write_gray(&p, 2, 1, &[0, 9]);
        assert!(load_parsing(&p, &[0, 1, 2]).is_err());
        assert_eq!(load_parsing(&p, &[0, 9]).unwrap().labels(), &[0, 9]);
    }

    #[test]
    fn iuv_round_trip_at_8_bit() {
        let dir = tempfile::tempdir().unwrap();
        let paths = IuvPaths {
            index: dir.path().join("i.png"),
            u: dir.path().join("u.png"),
            v: dir.path().join("v.png"),
        };
        let iuv = IuvPlane::new(2, 1, vec![0, 3], vec![0.0, 51.0 / 255.0], vec![0.0, 1.0]).unwrap();
        save_iuv(&iuv, &paths).unwrap();
        assert_eq!(load_iuv(&paths).unwrap(), iuv);
    }

    proptest! {
        #[test]
        fn tensor_round_trip_is_bit_exact(
            c in 1usize..4, h in 1usize..5, w in 1usize..5,
            seed in any::<u64>(),
        ) {
            let g = LatentGeometry::new(c, h, w);
            let mut s = seed;
            let data: Vec<f32> = (0..g.len())
                .map(|_| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    let v = f32::from_bits((s >> 32) as u32);
                    if v.is_finite() { v } else { 0.0 }
                })
                .collect();
            let t = LatentTensor::new(g, data).unwrap();
            let back = LatentTensor::from_bytes(&t.to_bytes(), Path::new("mem")).unwrap();
            prop_assert_eq!(back.geometry(), t.geometry());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn image_round_trip_is_exact_at_8_bit(raw in proptest::collection::vec(any::<u8>(), 12)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("i.png");
            let img = ImagePlane::new(2, 2, 3, raw.iter().map(|&s| f32::from(s) / 255.0).collect()).unwrap();
            save_image(&img, &p).unwrap();
            prop_assert_eq!(load_image(&p).unwrap(), img);
        }
    }
}
