//! Image quality metrics with optional exclusion masks.

use serde::Serialize;
use thiserror::Error;

use crate::image::{Mask, RgbImage};
use crate::losses::ssim_map;

pub const PSNR_CAP: f64 = 99.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no valid pixels after masking")]
    NoValidPixels,
    #[error("shape mismatch")]
    ShapeMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub psnr: f64,
    pub ssim: f64,
}

fn valid(mask: Option<&Mask>, p: usize) -> bool {
    mask.is_none_or(|m| m.data[p])
}

fn check(a: &RgbImage, b: &RgbImage, mask: Option<&Mask>) -> Result<usize, MetricsError> {
    if !a.same_shape(b) || mask.is_some_and(|m| m.width != a.width || m.height != a.height) {
        return Err(MetricsError::ShapeMismatch);
    }
    let n = (0..a.num_pixels()).filter(|&p| valid(mask, p)).count();
    if n == 0 {
        return Err(MetricsError::NoValidPixels);
    }
    Ok(n)
}

/// PSNR over pixels where `mask` is true (all pixels when `None`), peak 1.
pub fn psnr(a: &RgbImage, b: &RgbImage, mask: Option<&Mask>) -> Result<f64, MetricsError> {
    let n = check(a, b, mask)?;
    let mut se = 0.0;
    for p in 0..a.num_pixels() {
        if valid(mask, p) {
            for c in 0..3 {
                let d = a.data[3 * p + c] - b.data[3 * p + c];
                se += d * d;
            }
        }
    }
    let mse = se / (3 * n) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

/// Mean SSIM (11×11 Gaussian window) over valid pixels and channels.
pub fn ssim(a: &RgbImage, b: &RgbImage, mask: Option<&Mask>) -> Result<f64, MetricsError> {
    let n = check(a, b, mask)?;
    let map = ssim_map(a, b).map_err(|_| MetricsError::ShapeMismatch)?;
    let mut sum = 0.0;
    for p in 0..a.num_pixels() {
        if valid(mask, p) {
            sum += map[3 * p] + map[3 * p + 1] + map[3 * p + 2];
        }
    }
    Ok(sum / (3 * n) as f64)
}

pub fn evaluate_pair(a: &RgbImage, b: &RgbImage, mask: Option<&Mask>) -> Result<Metrics, MetricsError> {
    Ok(Metrics { psnr: psnr(a, b, mask)?, ssim: ssim(a, b, mask)? })
}
