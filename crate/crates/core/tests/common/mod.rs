//! Fixtures and finite-difference helpers shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uwsplat::projection::Splat2D;
use uwsplat::raster::{render, CUTOFF_POWER};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `‖a − n‖ / ‖n‖` (falls back to the absolute error for a zero reference).
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    if scale > 0.0 { diff / scale } else { diff }
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

pub fn round_f32(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x as f32 as f64).collect()
}

/// Relative errors at 64-bit (analytic vs. f64 central differences) and at
/// 32-bit (parameters stored as `f32`, analytic gradient rounded to `f32`).
pub struct GradCheck {
    pub err64: f64,
    pub err32: f64,
}

/// Runs both precision checks for a function with analytic gradient `g`.
pub fn check_gradient(
    x: &[f64],
    h: f64,
    mut f: impl FnMut(&[f64]) -> f64,
    mut g: impl FnMut(&[f64]) -> Vec<f64>,
) -> GradCheck {
    let err64 = rel_err(&g(x), &central_diff(x, h, &mut f));
    let x32 = round_f32(x);
    let err32 = rel_err(&round_f32(&g(&x32)), &central_diff(&x32, h, &mut f));
    GradCheck { err64, err32 }
}

pub fn random_image(w: usize, h: usize, seed: u64) -> uwsplat::RgbImage {
    let mut r = rng(seed);
    uwsplat::RgbImage::from_data(w, h, (0..w * h * 3).map(|_| r.gen_range(0.05..0.95)).collect())
}

pub fn random_weights(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
}

fn conic(s: &Splat2D) -> [f64; 3] {
    let [a, b, c] = s.cov2d;
    let det = a * c - b * b;
    [c / det, -b / det, a / det]
}

/// True when no pixel center sits within `margin` of a splat's cutoff and
/// the transmittance never approaches the early-termination floor, so that
/// small perturbations cannot cross a discontinuity of the blend.
pub fn well_conditioned(splats: &[Splat2D], w: usize, h: usize, margin: f64) -> bool {
    for s in splats {
        let q = conic(s);
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 + 0.5 - s.mean2d[0];
                let dy = y as f64 + 0.5 - s.mean2d[1];
                let p = -0.5 * (q[0] * dx * dx + 2.0 * q[1] * dx * dy + q[2] * dy * dy);
                if (p - CUTOFF_POWER).abs() < margin {
                    return false;
                }
            }
        }
    }
    let out = render(splats, w, h, [0.0; 3]);
    out.final_transmittance.iter().all(|&t| t > 1e-2)
}

/// Random splats inside a `w × h` frame with distinct depths.
pub fn random_splats(n: usize, w: usize, h: usize, seed: u64) -> Vec<Splat2D> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let sx: f64 = r.gen_range(1.5..5.0);
            let sy: f64 = r.gen_range(1.5..5.0);
            let th: f64 = r.gen_range(0.0..std::f64::consts::PI);
            let (c, s) = (th.cos(), th.sin());
            let cov = [
                c * c * sx * sx + s * s * sy * sy,
                c * s * (sx * sx - sy * sy),
                s * s * sx * sx + c * c * sy * sy,
            ];
            let lmax = uwsplat::projection::max_eigenvalue(cov);
            Splat2D {
                index: i,
                mean2d: [r.gen_range(2.0..w as f64 - 2.0), r.gen_range(2.0..h as f64 - 2.0)],
                cov2d: cov,
                depth: 1.0 + i as f64 * 0.37 + r.gen_range(0.0..0.3),
                color: [r.gen_range(0.1..0.9), r.gen_range(0.1..0.9), r.gen_range(0.1..0.9)],
                opacity: r.gen_range(0.1..0.6),
                radius: 3.0 * lmax.sqrt(),
            }
        })
        .collect()
}

/// First seed from `start` whose splat fixture is [`well_conditioned`].
pub fn conditioned_splats(n: usize, w: usize, h: usize, start: u64, margin: f64) -> Vec<Splat2D> {
    (start..start + 1000)
        .map(|seed| random_splats(n, w, h, seed))
        .find(|s| well_conditioned(s, w, h, margin))
        .expect("a well-conditioned fixture within 1000 seeds")
}

pub mod bmm;
pub mod density;
pub mod gradients;
pub mod invariants;
pub mod io;
pub mod scenes;
pub mod training;
