//! Rendering and loss invariants, returned as measured errors.

use rand::seq::SliceRandom;
use rand::Rng;

use uwsplat::losses::{ca_loss, depth_loss, gray_world_loss, rec_loss};
use uwsplat::raster::{render, render_reference};
use uwsplat::{GrayImage, Mask, MediumParams, RgbImage};

use super::{random_image, random_splats, rng};

/// Max over pixels of `|Σ blend weights + T_final − 1|`.
pub fn partition_of_unity_error(n: usize, w: usize, h: usize, seed: u64, opaque: bool) -> f64 {
    let mut splats = random_splats(n, w, h, seed);
    if opaque {
        // drive transmittance through the early-termination floor
        splats.iter_mut().for_each(|s| s.opacity = 0.995);
    }
    let out = render(&splats, w, h, [0.0; 3]);
    let mut worst: f64 = 0.0;
    for y in 0..h {
        for x in 0..w {
            worst = worst.max((out.weight_sum(&splats, x, y) - 1.0).abs());
        }
    }
    worst
}

/// Max image/depth difference between the tiled and brute-force renderers,
/// and whether coverage counts agree.
pub fn brute_force_difference(n: usize, w: usize, h: usize, seed: u64) -> (f64, bool) {
    let splats = random_splats(n, w, h, seed);
    let bg = [0.1, 0.2, 0.3];
    let out = render(&splats, w, h, bg);
    let (img, depth, covered) = render_reference(&splats, w, h, bg);
    let di = out.image.data.iter().zip(&img.data).map(|(a, b)| (a - b).abs());
    let dd = out.depth.data.iter().zip(&depth.data).map(|(a, b)| (a - b).abs());
    (di.chain(dd).fold(0.0, f64::max), out.covered_pixels == covered)
}

/// Max difference between renders of the same splats in two input orders.
pub fn shuffle_difference(n: usize, w: usize, h: usize, seed: u64) -> f64 {
    let splats = random_splats(n, w, h, seed);
    let mut shuffled = splats.clone();
    shuffled.shuffle(&mut rng(seed ^ 0xabc));
    let a = render(&splats, w, h, [0.2; 3]);
    let b = render(&shuffled, w, h, [0.2; 3]);
    let d = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    d(&a.image.data, &b.image.data)
        .max(d(&a.depth.data, &b.depth.data))
        .max(d(&a.final_transmittance, &b.final_transmittance))
}

/// Loss values at configurations where each loss must vanish.
pub fn loss_fixed_points() -> Vec<(&'static str, f64)> {
    let mut r = rng(8);
    let img = random_image(32, 24, 3);
    let mask = Mask::from_data(32, 24, (0..32 * 24).map(|_| r.gen_bool(0.7)).collect());
    let rec = rec_loss(&img, &img, None, 0.8)
        .unwrap()
        .0
        .abs()
        .max(rec_loss(&img, &img, Some(&mask), 0.3).unwrap().0.abs());

    let d = GrayImage::from_data(32, 24, (0..32 * 24).map(|_| r.gen_range(0.0..1.0)).collect());
    let mut affine: f64 = 0.0;
    for (a, c) in [(2.5, 0.3), (0.01, -7.0), (130.0, 4.0)] {
        let dh = GrayImage::from_data(32, 24, d.data.iter().map(|v| a * v + c).collect());
        affine = affine.max(depth_loss(&dh, &d).unwrap().0.abs());
    }

    let mut params = Vec::new();
    let mut z = Vec::new();
    for _ in 0..50 {
        let zi: f64 = r.gen_range(0.2..8.0);
        let bd: [f64; 3] = std::array::from_fn(|_| r.gen_range(0.05..1.5));
        let bb: [f64; 3] = std::array::from_fn(|_| r.gen_range(0.05..1.5));
        params.push(MediumParams {
            t_d: bd.map(|b| (-b * zi).exp()),
            t_b: bb.map(|b| (-b * zi).exp()),
            beta_d: bd,
            beta_b: bb,
            b: [0.3; 3],
        });
        z.push(zi);
    }
    let ca = ca_loss(&params, &z).0.abs();

    // checkerboard of 0.25 / 0.75 per channel: every channel mean is 0.5
    let mut half = RgbImage::new(16, 16);
    for (i, v) in half.data.iter_mut().enumerate() {
        let (x, y) = ((i / 3) % 16, (i / 3) / 16);
        *v = if (x + y) % 2 == 0 { 0.25 } else { 0.75 };
    }
    let gray = gray_world_loss(&half).0.abs();
    vec![
        ("rec_loss(I, I)", rec),
        ("depth_loss under affine maps", affine),
        ("ca_loss at T = exp(-beta z)", ca),
        ("gray-world at channel means 0.5", gray),
    ]
}
