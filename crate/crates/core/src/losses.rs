//! Training objectives and their analytic gradients: masked L1 + D-SSIM
//! reconstruction, normalized depth supervision, channel-wise depth
//! alignment of the medium parameters, and the gray-world prior.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{min_max, GrayImage, Mask, RgbImage};
use crate::medium::{MediumParams, EPS_BETA};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
    pub lambda_d: f64,
    pub lambda_ca: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: 0.8, lambda_d: 0.05, lambda_ca: 0.01 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Main,
}

/// Scalar value plus gradient w.r.t. the (interleaved) input image.
pub type ImageLoss = (f64, Vec<f64>);

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as i64;
    let mut g: [f64; SSIM_WINDOW] = std::array::from_fn(|i| {
        let k = (i as i64 - r) as f64;
        (-k * k / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
    });
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable Gaussian blur of one plane with zero padding. The kernel is
/// symmetric, so this is also its own adjoint.
fn blur(plane: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as i64;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &g) in taps.iter().enumerate() {
                let sx = x as i64 + i as i64 - r;
                if sx >= 0 && (sx as usize) < w {
                    acc += g * plane[y * w + sx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &g) in taps.iter().enumerate() {
                let sy = y as i64 + i as i64 - r;
                if sy >= 0 && (sy as usize) < h {
                    acc += g * tmp[sy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn plane(img: &RgbImage, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(3).copied().collect()
}

struct SsimStats {
    mx: Vec<f64>,
    my: Vec<f64>,
    exx: Vec<f64>,
    eyy: Vec<f64>,
    exy: Vec<f64>,
}

fn ssim_stats(x: &[f64], y: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> SsimStats {
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    SsimStats {
        mx: blur(x, w, h, taps),
        my: blur(y, w, h, taps),
        exx: blur(&xx, w, h, taps),
        eyy: blur(&yy, w, h, taps),
        exy: blur(&xy, w, h, taps),
    }
}

#[inline]
fn ssim_terms(s: &SsimStats, p: usize) -> (f64, f64, f64, f64) {
    let (mx, my) = (s.mx[p], s.my[p]);
    let a1 = 2.0 * mx * my + C1;
    let a2 = 2.0 * (s.exy[p] - mx * my) + C2;
    let b1 = mx * mx + my * my + C1;
    let b2 = (s.exx[p] - mx * mx) + (s.eyy[p] - my * my) + C2;
    (a1, a2, b1, b2)
}

/// Per-pixel, per-channel SSIM map (interleaved like the inputs).
pub fn ssim_map(a: &RgbImage, b: &RgbImage) -> Result<Vec<f64>, LossError> {
    check_shape(a, b)?;
    let (w, h) = (a.width, a.height);
    let taps = gaussian_taps();
    let mut out = vec![0.0; w * h * 3];
    for c in 0..3 {
        let st = ssim_stats(&plane(a, c), &plane(b, c), w, h, &taps);
        for p in 0..w * h {
            let (a1, a2, b1, b2) = ssim_terms(&st, p);
            out[3 * p + c] = a1 * a2 / (b1 * b2);
        }
    }
    Ok(out)
}

fn check_shape(a: &RgbImage, b: &RgbImage) -> Result<(), LossError> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(LossError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )))
    }
}

/// `λ·mean(ω·|Î − I|) + (1 − λ)·mean(ω·(1 − SSIM)/2)`, means over all pixels
/// and channels. Returns the gradient w.r.t. `Î`.
pub fn rec_loss(
    rendered: &RgbImage,
    target: &RgbImage,
    omega: Option<&Mask>,
    lambda: f64,
) -> Result<ImageLoss, LossError> {
    check_shape(rendered, target)?;
    let (w, h) = (rendered.width, rendered.height);
    if let Some(m) = omega {
        if m.width != w || m.height != h {
            return Err(LossError::ShapeMismatch(format!(
                "mask {}x{} vs image {}x{}",
                m.width, m.height, w, h
            )));
        }
    }
    let inlier = |p: usize| omega.is_none_or(|m| m.data[p]);
    let n = (w * h * 3) as f64;
    let mut grad = vec![0.0; w * h * 3];
    let mut l1 = 0.0;
    for p in 0..w * h {
        if !inlier(p) {
            continue;
        }
        for c in 0..3 {
            let d = rendered.data[3 * p + c] - target.data[3 * p + c];
            l1 += d.abs();
            if d != 0.0 {
                grad[3 * p + c] += lambda * d.signum() / n;
            }
        }
    }
    let mut dssim = 0.0;
    if lambda < 1.0 {
        let taps = gaussian_taps();
        for c in 0..3 {
            let x = plane(rendered, c);
            let y = plane(target, c);
            let st = ssim_stats(&x, &y, w, h, &taps);
            // weights on S at each pixel: dL/dS = −(1 − λ)·ω/(2n)
            let mut g_mx = vec![0.0; w * h];
            let mut g_exx = vec![0.0; w * h];
            let mut g_exy = vec![0.0; w * h];
            for p in 0..w * h {
                if !inlier(p) {
                    continue;
                }
                let (a1, a2, b1, b2) = ssim_terms(&st, p);
                let s = a1 * a2 / (b1 * b2);
                dssim += (1.0 - s) / 2.0;
                let ws = -(1.0 - lambda) / (2.0 * n);
                let (mx, my) = (st.mx[p], st.my[p]);
                let ds_mx = (2.0 * my * a2 - 2.0 * my * a1) / (b1 * b2)
                    - s * (2.0 * mx / b1 - 2.0 * mx / b2);
                g_mx[p] = ws * ds_mx;
                g_exx[p] = ws * (-s / b2);
                g_exy[p] = ws * (2.0 * a1 / (b1 * b2));
            }
            let bm = blur(&g_mx, w, h, &taps);
            let bxx = blur(&g_exx, w, h, &taps);
            let bxy = blur(&g_exy, w, h, &taps);
            for p in 0..w * h {
                grad[3 * p + c] += bm[p] + 2.0 * x[p] * bxx[p] + y[p] * bxy[p];
            }
        }
    }
    let loss = lambda * l1 / n + (1.0 - lambda) * dssim / n;
    Ok((loss, grad))
}

/// Mean absolute difference of the min-max normalized maps. The gradient
/// w.r.t. the raw `d_hat` includes the paths through its min and max.
pub fn depth_loss(d_hat: &GrayImage, d: &GrayImage) -> Result<(f64, Vec<f64>), LossError> {
    if d_hat.width != d.width || d_hat.height != d.height {
        return Err(LossError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            d_hat.width, d_hat.height, d.width, d.height
        )));
    }
    let n = d_hat.data.len();
    let dn = d.min_max_normalized();
    let (lo, hi) = min_max(&d_hat.data);
    let r = hi - lo;
    if n == 0 {
        return Ok((0.0, Vec::new()));
    }
    if !(r > 0.0 && r.is_finite()) {
        let loss = dn.data.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
        return Ok((loss, vec![0.0; n]));
    }
    let u: Vec<f64> = d_hat.data.iter().map(|&x| (x - lo) / r).collect();
    let mut loss = 0.0;
    let mut g: Vec<f64> = Vec::with_capacity(n);
    for (ui, di) in u.iter().zip(&dn.data) {
        let e = ui - di;
        loss += e.abs();
        g.push(if e == 0.0 { 0.0 } else { e.signum() / n as f64 });
    }
    let arg = |better: fn(f64, f64) -> bool| {
        let mut k = 0;
        for i in 1..n {
            if better(d_hat.data[i], d_hat.data[k]) {
                k = i;
            }
        }
        k
    };
    let imin = arg(|a, b| a < b);
    let imax = arg(|a, b| a > b);
    let s_lo: f64 = g.iter().zip(&u).map(|(gj, uj)| gj * (uj - 1.0)).sum();
    let s_hi: f64 = g.iter().zip(&u).map(|(gj, uj)| gj * uj).sum();
    let mut grad: Vec<f64> = g.iter().map(|gj| gj / r).collect();
    grad[imin] += s_lo / r;
    grad[imax] -= s_hi / r;
    Ok((loss / n as f64, grad))
}

/// Gradients of [`ca_loss`].
#[derive(Debug, Clone, PartialEq)]
pub struct CaGrads {
    pub d_params: Vec<MediumParams>,
    pub d_z: Vec<f64>,
}

/// Mean over Gaussians of `Σ_{c, y∈{d,b}} |−ln T_c^y / β_c^y − z|`.
pub fn ca_loss(params: &[MediumParams], z: &[f64]) -> (f64, CaGrads) {
    assert_eq!(params.len(), z.len());
    let n = params.len();
    let zero = MediumParams { t_d: [0.0; 3], t_b: [0.0; 3], beta_d: [0.0; 3], beta_b: [0.0; 3], b: [0.0; 3] };
    let mut grads = CaGrads { d_params: vec![zero; n], d_z: vec![0.0; n] };
    if n == 0 {
        return (0.0, grads);
    }
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    for i in 0..n {
        let p = &params[i];
        let g = &mut grads.d_params[i];
        for c in 0..3 {
            for (t, beta, dt, dbeta) in [
                (p.t_d[c], p.beta_d[c], &mut g.t_d[c], &mut g.beta_d[c]),
                (p.t_b[c], p.beta_b[c], &mut g.t_b[c], &mut g.beta_b[c]),
            ] {
                let bb = beta.max(EPS_BETA);
                let lt = t.max(1e-300).ln();
                let e = -lt / bb - z[i];
                total += e.abs();
                let s = if e == 0.0 { 0.0 } else { e.signum() * inv_n };
                if t > 1e-300 {
                    *dt += -s / (t * bb);
                }
                if beta > EPS_BETA {
                    *dbeta += s * lt / (bb * bb);
                }
                grads.d_z[i] -= s;
            }
        }
    }
    (total * inv_n, grads)
}

/// `Σ_c (mean(J_c) − 0.5)²` with its (per-channel uniform) gradient.
pub fn gray_world_loss(j: &RgbImage) -> ImageLoss {
    let mu = j.channel_means();
    let n = j.num_pixels().max(1) as f64;
    let loss = mu.iter().map(|m| (m - 0.5) * (m - 0.5)).sum();
    let g: [f64; 3] = std::array::from_fn(|c| 2.0 * (mu[c] - 0.5) / n);
    let mut grad = Vec::with_capacity(j.data.len());
    for _ in 0..j.num_pixels() {
        grad.extend_from_slice(&g);
    }
    (loss, grad)
}

/// Component values of one iteration.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub rec: f64,
    pub depth: f64,
    pub ca: f64,
    pub gray: f64,
}

/// Total loss and the factor each component's gradient is multiplied by.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossRouting {
    pub total: f64,
    pub rec: f64,
    pub depth: f64,
    pub ca: f64,
    pub gray: f64,
}

/// Warm-up: `λ_d L_d + λ_ca L_ca`. Main: `L_rec + λ_d L_d + λ_ca L_ca + L_g`.
pub fn total_loss(c: &LossComponents, w: &LossWeights, phase: Phase) -> LossRouting {
    let main = if phase == Phase::Main { 1.0 } else { 0.0 };
    let r = LossRouting { total: 0.0, rec: main, depth: w.lambda_d, ca: w.lambda_ca, gray: main };
    LossRouting {
        total: r.rec * c.rec + r.depth * c.depth + r.ca * c.ca + r.gray * c.gray,
        ..r
    }
}
