//! Real spherical harmonics up to degree 3, in the sign convention used by
//! 3DGS checkpoints, with direction derivatives for backpropagation.

use thiserror::Error;

pub const MAX_DEGREE: usize = 3;

pub const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

#[derive(Debug, Error, PartialEq)]
#[error("SH degree {requested} exceeds the stored degree {stored}")]
pub struct DegreeOutOfRange {
    pub requested: usize,
    pub stored: usize,
}

#[inline]
pub const fn num_basis(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

#[inline]
pub fn rgb_to_dc(c: f64) -> f64 {
    (c - 0.5) / C0
}

#[inline]
pub fn dc_to_rgb(k: f64) -> f64 {
    k * C0 + 0.5
}

/// Basis values `Y_b(d)` for `b < num_basis(degree)`; `d` must be unit length.
pub fn basis(d: [f64; 3], degree: usize, out: &mut [f64; 16]) {
    let [x, y, z] = d;
    out[0] = C0;
    if degree < 1 {
        return;
    }
    out[1] = -C1 * y;
    out[2] = C1 * z;
    out[3] = -C1 * x;
    if degree < 2 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    out[4] = C2[0] * x * y;
    out[5] = C2[1] * y * z;
    out[6] = C2[2] * (2.0 * zz - xx - yy);
    out[7] = C2[3] * x * z;
    out[8] = C2[4] * (xx - yy);
    if degree < 3 {
        return;
    }
    out[9] = C3[0] * y * (3.0 * xx - yy);
    out[10] = C3[1] * x * y * z;
    out[11] = C3[2] * y * (4.0 * zz - xx - yy);
    out[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    out[13] = C3[4] * x * (4.0 * zz - xx - yy);
    out[14] = C3[5] * z * (xx - yy);
    out[15] = C3[6] * x * (xx - 3.0 * yy);
}

/// Gradients of each basis function with respect to the (unit) direction
/// components, treating `x, y, z` as independent.
pub fn basis_grad(d: [f64; 3], degree: usize, out: &mut [[f64; 3]; 16]) {
    let [x, y, z] = d;
    out[0] = [0.0; 3];
    if degree < 1 {
        return;
    }
    out[1] = [0.0, -C1, 0.0];
    out[2] = [0.0, 0.0, C1];
    out[3] = [-C1, 0.0, 0.0];
    if degree < 2 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    out[4] = [C2[0] * y, C2[0] * x, 0.0];
    out[5] = [0.0, C2[1] * z, C2[1] * y];
    out[6] = [-2.0 * C2[2] * x, -2.0 * C2[2] * y, 4.0 * C2[2] * z];
    out[7] = [C2[3] * z, 0.0, C2[3] * x];
    out[8] = [2.0 * C2[4] * x, -2.0 * C2[4] * y, 0.0];
    if degree < 3 {
        return;
    }
    out[9] = [C3[0] * 6.0 * x * y, C3[0] * (3.0 * xx - 3.0 * yy), 0.0];
    out[10] = [C3[1] * y * z, C3[1] * x * z, C3[1] * x * y];
    out[11] = [
        -2.0 * C3[2] * x * y,
        C3[2] * (4.0 * zz - xx - 3.0 * yy),
        8.0 * C3[2] * y * z,
    ];
    out[12] = [
        -6.0 * C3[3] * x * z,
        -6.0 * C3[3] * y * z,
        C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
    ];
    out[13] = [
        C3[4] * (4.0 * zz - 3.0 * xx - yy),
        -2.0 * C3[4] * x * y,
        8.0 * C3[4] * x * z,
    ];
    out[14] = [2.0 * C3[5] * x * z, -2.0 * C3[5] * y * z, C3[5] * (xx - yy)];
    out[15] = [C3[6] * (3.0 * xx - 3.0 * yy), -6.0 * C3[6] * x * y, 0.0];
}

/// Evaluates view-dependent color: `max(Σ_b k_b Y_b(dir) + 0.5, 0)` per
/// channel. `coeffs` is laid out `[channel][basis]` with `stride` basis
/// entries per channel; only the first `num_basis(degree)` are used.
pub fn eval_sh(
    coeffs: &[f64],
    stride: usize,
    dir: [f64; 3],
    degree: usize,
) -> Result<[f64; 3], DegreeOutOfRange> {
    let stored = (stride as f64).sqrt() as usize - 1;
    if degree > stored || degree > MAX_DEGREE {
        return Err(DegreeOutOfRange { requested: degree, stored });
    }
    let mut y = [0.0; 16];
    basis(dir, degree, &mut y);
    let nb = num_basis(degree);
    let mut rgb = [0.0; 3];
    for c in 0..3 {
        let k = &coeffs[c * stride..c * stride + nb];
        let v: f64 = k.iter().zip(&y[..nb]).map(|(a, b)| a * b).sum::<f64>() + 0.5;
        rgb[c] = v.max(0.0);
    }
    Ok(rgb)
}

/// Backward of [`eval_sh`]. Accumulates coefficient gradients into
/// `d_coeffs` and returns the gradient with respect to the unit direction.
pub fn eval_sh_backward(
    coeffs: &[f64],
    stride: usize,
    dir: [f64; 3],
    degree: usize,
    d_rgb: [f64; 3],
    d_coeffs: &mut [f64],
) -> [f64; 3] {
    let mut y = [0.0; 16];
    let mut dy = [[0.0; 3]; 16];
    basis(dir, degree, &mut y);
    basis_grad(dir, degree, &mut dy);
    let nb = num_basis(degree);
    let mut d_dir = [0.0; 3];
    for c in 0..3 {
        let k = &coeffs[c * stride..c * stride + nb];
        let raw: f64 = k.iter().zip(&y[..nb]).map(|(a, b)| a * b).sum::<f64>() + 0.5;
        if raw < 0.0 {
            continue;
        }
        let g = d_rgb[c];
        for b in 0..nb {
            d_coeffs[c * stride + b] += g * y[b];
            for a in 0..3 {
                d_dir[a] += g * k[b] * dy[b][a];
            }
        }
    }
    d_dir
}
