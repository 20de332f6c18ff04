//! Two-Gaussian attenuation fixture for densification statistics.

use uwsplat::density::{accumulate, average_gradients, view_stats, DensityControlConfig};
use uwsplat::losses::rec_loss;
use uwsplat::projection::Splat2D;
use uwsplat::raster::{raster_backward, render};
use uwsplat::GaussianCloud;

pub const T_D: [f64; 2] = [1.0, 0.4];

const W: usize = 64;
const H: usize = 32;

fn splat(index: usize, x: f64, y: f64, var: f64, t_d: f64) -> Splat2D {
    let base = [0.8, 0.6, 0.4];
    Splat2D {
        index,
        mean2d: [x, y],
        cov2d: [var, 0.2 * var, 0.8 * var],
        depth: 4.0,
        color: base.map(|c| c * t_d),
        opacity: 0.8,
        radius: 3.0 * var.sqrt(),
    }
}

/// Average densification gradient of the unattenuated and attenuated
/// Gaussian over several views. The two are identical apart from their
/// direct-transmission factors `T_D`; the target shows both, equally
/// attenuated, at slightly different positions. Background is black and the
/// loss is pure L1.
pub fn averages(physics_comp: bool) -> [f64; 2] {
    let cfg = DensityControlConfig {
        enable_physics_comp: physics_comp,
        enable_pixel_weighting: true,
        enable_z_damp: false,
        ..Default::default()
    };
    let mut cloud = GaussianCloud::empty(0);
    for _ in 0..2 {
        cloud.push([0.0; 3], [1.0, 0.0, 0.0, 0.0], [0.0; 3], 0.5, [0.5; 3]);
    }
    let views = [(1.5, 0.5, 4.0), (-1.0, 1.2, 6.0), (0.7, -1.4, 2.5), (-0.4, -0.9, 9.0)];
    for (dx, dy, var) in views {
        let rendered: Vec<Splat2D> = (0..2).map(|k| splat(k, 16.0 + 32.0 * k as f64, 16.0, var, T_D[k])).collect();
        let target: Vec<Splat2D> =
            (0..2).map(|k| splat(k, 16.0 + 32.0 * k as f64 + dx, 16.0 + dy, var, T_D[k])).collect();
        let out = render(&rendered, W, H, [0.0; 3]);
        let tgt = render(&target, W, H, [0.0; 3]);
        let (_, d_image) = rec_loss(&out.image, &tgt.image, None, 1.0).unwrap();
        let grads = raster_backward(&rendered, &out, &d_image, None);
        let stats = view_stats(&rendered, &out.covered_pixels, &grads.d_mean2d, &T_D, (W, H), 1.0, &cfg);
        accumulate(&mut cloud, &stats, &cfg);
    }
    let avg = average_gradients(&cloud);
    [avg[0], avg[1]]
}
