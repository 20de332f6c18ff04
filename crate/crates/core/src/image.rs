//! In-memory image containers and PNG helpers.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {reason}")]
    Decode { path: String, reason: String },
    #[error("cannot encode {path}: {reason}")]
    Encode { path: String, reason: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Interleaved RGB image with values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height * 3);
        Self { width, height, data }
    }

    #[inline]
    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_shape(&self, other: &RgbImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Mean of each channel.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut m = [0.0; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                m[c] += px[c];
            }
        }
        let n = self.num_pixels().max(1) as f64;
        m.map(|v| v / n)
    }

    pub fn load_png(path: &Path) -> Result<Self, ImageError> {
        let img = ::image::open(path).map_err(|e| ImageError::Decode {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
        Ok(Self { width: w as usize, height: h as usize, data })
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let bytes: Vec<u8> =
            self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        let buf = ::image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions");
        buf.save(path).map_err(|e| ImageError::Encode {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }
}

/// Single-channel image.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height);
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Per-image min-max normalization to [0, 1]. A constant image maps to
    /// all zeros.
    pub fn min_max_normalized(&self) -> GrayImage {
        let (lo, hi) = min_max(&self.data);
        let range = hi - lo;
        let data = if range > 0.0 && range.is_finite() {
            self.data.iter().map(|&v| (v - lo) / range).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        GrayImage { width: self.width, height: self.height, data }
    }
}

pub(crate) fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Binary per-pixel mask; `true` marks an inlier / selected pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, value: bool) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), width * height);
        Self { width, height, data }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len().max(1) as f64
    }

    pub fn all(&self) -> bool {
        self.data.iter().all(|&b| b)
    }

    /// Writes the mask as a 1-bit grayscale PNG (white = true).
    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        let io_err = |source| ImageError::Io { path: path.display().to_string(), source };
        let file = File::create(path).map_err(io_err)?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::One);
        let enc_err = |e: png::EncodingError| ImageError::Encode {
            path: path.display().to_string(),
            reason: e.to_string(),
        };
        let mut writer = enc.write_header().map_err(enc_err)?;
        let row_bytes = self.width.div_ceil(8);
        let mut bytes = vec![0u8; row_bytes * self.height];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bytes[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
                }
            }
        }
        writer.write_image_data(&bytes).map_err(enc_err)
    }

    pub fn load_png(path: &Path) -> Result<Self, ImageError> {
        let img = ::image::open(path).map_err(|e| ImageError::Decode {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let luma = img.to_luma8();
        let (w, h) = luma.dimensions();
        let data = luma.as_raw().iter().map(|&v| v >= 128).collect();
        Ok(Self { width: w as usize, height: h as usize, data })
    }
}
