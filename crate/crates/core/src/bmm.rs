//! Binary motion mask: trimmed residual thresholding, 3×3 diffusion, and
//! 8×8 patch classification from 16×16 context, OR-combined into one inlier
//! mask.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{GrayImage, Mask, RgbImage};

pub const PATCH: usize = 8;
pub const CONTEXT: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum BmmError {
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("invalid mask config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BmmConfig {
    /// Quantile of the sorted residuals that becomes the next `T_eps`.
    pub trim_quantile: f64,
    pub t_star: f64,
    pub t_r: f64,
}

impl Default for BmmConfig {
    fn default() -> Self {
        Self { trim_quantile: 0.8, t_star: 0.5, t_r: 0.6 }
    }
}

impl BmmConfig {
    pub fn validate(&self) -> Result<(), BmmError> {
        for (name, v) in [("trim_quantile", self.trim_quantile), ("t_star", self.t_star), ("t_r", self.t_r)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(BmmError::InvalidConfig(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Which constituent masks feed the final union.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BmmMode {
    Omega1,
    Omega12,
    #[default]
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionMask {
    pub omega1: Mask,
    pub omega2: Mask,
    pub omega3: Mask,
    pub omega: Mask,
    pub residual: GrayImage,
    /// Threshold that produced `omega1`.
    pub t_eps: f64,
    pub t_star: f64,
    pub t_r: f64,
    pub trim_quantile: f64,
}

/// Per-pixel L2 norm of the RGB difference.
pub fn residual(rendered: &RgbImage, target: &RgbImage) -> Result<GrayImage, BmmError> {
    if !rendered.same_shape(target) {
        return Err(BmmError::ShapeMismatch(
            rendered.width,
            rendered.height,
            target.width,
            target.height,
        ));
    }
    let data = rendered
        .data
        .chunks_exact(3)
        .zip(target.data.chunks_exact(3))
        .map(|(a, b)| {
            let d: [f64; 3] = std::array::from_fn(|k| a[k] - b[k]);
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
        })
        .collect();
    Ok(GrayImage::from_data(rendered.width, rendered.height, data))
}

/// The `rho`-quantile of the values: element `ceil(rho·n) − 1` of the sorted
/// list (so at least a `rho` fraction is `≤` the result).
pub fn trim_threshold(residual: &GrayImage, rho: f64) -> f64 {
    let mut v = residual.data.clone();
    if v.is_empty() {
        return f64::INFINITY;
    }
    v.sort_by(f64::total_cmp);
    let k = ((rho * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
    v[k]
}

/// `ω₁ = ε ≤ T_eps`.
pub fn mask1(residual: &GrayImage, t_eps: f64) -> Mask {
    Mask::from_data(
        residual.width,
        residual.height,
        residual.data.iter().map(|&e| e <= t_eps).collect(),
    )
}

/// `ω₂ = (ω₁ ∗ B) ≥ T_*` with `B` the normalized 3×3 box, replicate borders.
pub fn mask2(omega1: &Mask, t_star: f64) -> Mask {
    let (w, h) = (omega1.width, omega1.height);
    let mut out = Mask::new(w, h, false);
    for y in 0..h {
        for x in 0..w {
            let mut count = 0u32;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    count += omega1.get(sx, sy) as u32;
                }
            }
            out.set(x, y, count as f64 / 9.0 >= t_star);
        }
    }
    out
}

/// Each 8×8 patch (grid anchored at the origin) becomes entirely true iff
/// the mean of `ω₂` over the 16×16 window centered on it, clipped at the
/// borders, is at least `T_R`.
pub fn mask3(omega2: &Mask, t_r: f64) -> Mask {
    let (w, h) = (omega2.width, omega2.height);
    // summed-area table
    let mut sat = vec![0u32; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0u32;
        for x in 0..w {
            row += omega2.get(x, y) as u32;
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    let rect = |x0: usize, y0: usize, x1: usize, y1: usize| {
        sat[y1 * (w + 1) + x1] + sat[y0 * (w + 1) + x0]
            - sat[y0 * (w + 1) + x1]
            - sat[y1 * (w + 1) + x0]
    };
    let margin = (CONTEXT - PATCH) / 2;
    let mut out = Mask::new(w, h, false);
    for py in (0..h).step_by(PATCH) {
        for px in (0..w).step_by(PATCH) {
            let x0 = px.saturating_sub(margin);
            let y0 = py.saturating_sub(margin);
            let x1 = (px + PATCH + margin).min(w);
            let y1 = (py + PATCH + margin).min(h);
            let area = ((x1 - x0) * (y1 - y0)) as f64;
            let keep = rect(x0, y0, x1, y1) as f64 / area >= t_r;
            if keep {
                for y in py..(py + PATCH).min(h) {
                    for x in px..(px + PATCH).min(w) {
                        out.set(x, y, true);
                    }
                }
            }
        }
    }
    out
}

/// Pixelwise OR of the three masks.
pub fn combine(omega1: &Mask, omega2: &Mask, omega3: &Mask) -> Result<Mask, BmmError> {
    for m in [omega2, omega3] {
        if m.width != omega1.width || m.height != omega1.height {
            return Err(BmmError::ShapeMismatch(omega1.width, omega1.height, m.width, m.height));
        }
    }
    let data = (0..omega1.data.len())
        .map(|i| omega1.data[i] || omega2.data[i] || omega3.data[i])
        .collect();
    Ok(Mask::from_data(omega1.width, omega1.height, data))
}

/// Builds all masks from a residual map and a threshold.
pub fn build_mask(residual: GrayImage, t_eps: f64, cfg: &BmmConfig, mode: BmmMode) -> MotionMask {
    let (w, h) = (residual.width, residual.height);
    let omega1 = mask1(&residual, t_eps);
    let omega2 = match mode {
        BmmMode::Omega1 => Mask::new(w, h, false),
        _ => mask2(&omega1, cfg.t_star),
    };
    let omega3 = match mode {
        BmmMode::Full => mask3(&omega2, cfg.t_r),
        _ => Mask::new(w, h, false),
    };
    let omega = combine(&omega1, &omega2, &omega3).expect("masks share a shape");
    MotionMask {
        omega1,
        omega2,
        omega3,
        omega,
        residual,
        t_eps,
        t_star: cfg.t_star,
        t_r: cfg.t_r,
        trim_quantile: cfg.trim_quantile,
    }
}

/// Threshold carried between iterations: starts at `+∞` (everything is an
/// inlier) and becomes the trimmed quantile of each iteration's residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct BmmState {
    pub t_eps: f64,
}

impl Default for BmmState {
    fn default() -> Self {
        Self { t_eps: f64::INFINITY }
    }
}

impl BmmState {
    pub fn step(
        &mut self,
        rendered: &RgbImage,
        target: &RgbImage,
        cfg: &BmmConfig,
        mode: BmmMode,
    ) -> Result<MotionMask, BmmError> {
        let eps = residual(rendered, target)?;
        let next = trim_threshold(&eps, cfg.trim_quantile);
        let mask = build_mask(eps, self.t_eps, cfg, mode);
        self.t_eps = next;
        Ok(mask)
    }
}
