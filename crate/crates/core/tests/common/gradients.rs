//! Finite-difference checks of every analytic gradient, as named results.

use rand::Rng;

use uwsplat::losses::{ca_loss, depth_loss, gray_world_loss, rec_loss, total_loss, LossComponents, LossWeights, Phase};
use uwsplat::medium::{MediumNet, MediumParams};
use uwsplat::projection::Splat2D;
use uwsplat::raster::{raster_backward, render};
use uwsplat::{GrayImage, Mask, RgbImage};

use super::{check_gradient, conditioned_splats, random_image, random_weights, rng, GradCheck};

pub const W: usize = 32;
pub const H: usize = 32;
pub const N_SPLATS: usize = 20;
const BG: [f64; 3] = [0.2, 0.3, 0.1];

#[derive(Clone, Copy, Debug)]
enum Field {
    Mean,
    Cov,
    Color,
    Opacity,
    Depth,
}

fn get(s: &[Splat2D], f: Field) -> Vec<f64> {
    s.iter()
        .flat_map(|s| match f {
            Field::Mean => s.mean2d.to_vec(),
            Field::Cov => s.cov2d.to_vec(),
            Field::Color => s.color.to_vec(),
            Field::Opacity => vec![s.opacity],
            Field::Depth => vec![s.depth],
        })
        .collect()
}

fn set(s: &[Splat2D], f: Field, x: &[f64]) -> Vec<Splat2D> {
    let mut out = s.to_vec();
    let k = match f {
        Field::Mean => 2,
        Field::Cov | Field::Color => 3,
        Field::Opacity | Field::Depth => 1,
    };
    for (sp, v) in out.iter_mut().zip(x.chunks_exact(k)) {
        match f {
            Field::Mean => sp.mean2d.copy_from_slice(v),
            Field::Cov => sp.cov2d.copy_from_slice(v),
            Field::Color => sp.color.copy_from_slice(v),
            Field::Opacity => sp.opacity = v[0],
            Field::Depth => sp.depth = v[0],
        }
    }
    out
}

/// Rasterizer gradients for a 20-splat, 32×32 fixture under a random linear
/// functional of the image and depth.
pub fn rasterizer() -> Vec<(&'static str, GradCheck)> {
    let splats = conditioned_splats(N_SPLATS, W, H, 11, 1e-3);
    let wi = random_weights(W * H * 3, 1);
    let wd = random_weights(W * H, 2);
    let loss = |s: &[Splat2D]| {
        let out = render(s, W, H, BG);
        let a: f64 = out.image.data.iter().zip(&wi).map(|(v, w)| v * w).sum();
        let b: f64 = out.depth.data.iter().zip(&wd).map(|(v, w)| v * w).sum();
        a + b
    };
    let grads = |s: &[Splat2D]| {
        let out = render(s, W, H, BG);
        raster_backward(s, &out, &wi, Some(&wd))
    };
    let mut res = Vec::new();
    for (name, f, h) in [
        ("raster mean2d", Field::Mean, 1e-6),
        ("raster cov2d", Field::Cov, 1e-6),
        ("raster color", Field::Color, 1e-6),
        ("raster opacity", Field::Opacity, 1e-6),
        ("raster depth", Field::Depth, 1e-6),
    ] {
        let x = get(&splats, f);
        let c = check_gradient(&x, h, |x| loss(&set(&splats, f, x)), |x| {
            let g = grads(&set(&splats, f, x));
            match f {
                Field::Mean => g.d_mean2d.iter().flatten().copied().collect(),
                Field::Cov => g.d_cov2d.iter().flatten().copied().collect(),
                Field::Color => g.d_color.iter().flatten().copied().collect(),
                Field::Opacity => g.d_opacity.clone(),
                Field::Depth => g.d_depth.clone(),
            }
        });
        res.push((name, c));
    }
    let c = check_gradient(&BG, 1e-6, |b| {
        let out = render(&splats, W, H, [b[0], b[1], b[2]]);
        out.image.data.iter().zip(&wi).map(|(v, w)| v * w).sum()
    }, |b| {
        let out = render(&splats, W, H, [b[0], b[1], b[2]]);
        raster_backward(&splats, &out, &wi, Some(&wd)).d_background.to_vec()
    });
    res.push(("raster background", c));
    res
}

fn params_from(v: &[f64]) -> MediumParams {
    let a = |k: usize| [v[k], v[k + 1], v[k + 2]];
    MediumParams { t_d: a(0), t_b: a(3), beta_d: a(6), beta_b: a(9), b: a(12) }
}

fn params_to(p: &MediumParams) -> Vec<f64> {
    [p.t_d, p.t_b, p.beta_d, p.beta_b, p.b].concat()
}

fn mlp_inputs() -> Vec<(f64, [f64; 3])> {
    let mut r = rng(5);
    (0..6)
        .map(|_| {
            let d: [f64; 3] = std::array::from_fn(|_| r.gen_range(-1.0..1.0));
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            (r.gen_range(0.5..6.0), d.map(|v| v / n))
        })
        .collect()
}

/// Medium MLP weight gradients (and input gradients) under a random linear
/// functional of all five heads.
pub fn medium_mlp() -> Vec<(&'static str, GradCheck)> {
    let base = MediumNet::new(3, 8.0);
    let inputs = mlp_inputs();
    let u: Vec<MediumParams> =
        random_weights(15 * inputs.len(), 4).chunks_exact(15).map(params_from).collect();
    let value = |net: &MediumNet, inp: &[(f64, [f64; 3])]| -> f64 {
        let (p, _) = net.forward_batch(inp).unwrap();
        p.iter().zip(&u).map(|(p, u)| params_to(p).iter().zip(params_to(u)).map(|(a, b)| a * b).sum::<f64>()).sum()
    };
    let with = |x: &[f64]| {
        let mut n = base.clone();
        n.params_mut().copy_from_slice(x);
        n
    };
    let weights = check_gradient(base.params(), 1e-6, |x| value(&with(x), &inputs), |x| {
        let n = with(x);
        let (_, cache) = n.forward_batch(&inputs).unwrap();
        n.backward(&cache, &u).0
    });
    let flat_in: Vec<f64> = inputs.iter().flat_map(|(z, d)| [*z, d[0], d[1], d[2]]).collect();
    let unflat = |x: &[f64]| -> Vec<(f64, [f64; 3])> { x.chunks_exact(4).map(|c| (c[0], [c[1], c[2], c[3]])).collect() };
    let inputs_check = check_gradient(&flat_in, 1e-6, |x| value(&base, &unflat(x)), |x| {
        let (_, cache) = base.forward_batch(&unflat(x)).unwrap();
        base.backward(&cache, &u).1.iter().flat_map(|(z, d)| [*z, d[0], d[1], d[2]]).collect()
    });
    vec![("medium mlp weights", weights), ("medium mlp inputs", inputs_check)]
}

fn image_with(shape: &RgbImage, x: &[f64]) -> RgbImage {
    RgbImage::from_data(shape.width, shape.height, x.to_vec())
}

/// All five losses (reconstruction, depth, channel alignment, gray-world,
/// and the routed total) at 32×32.
pub fn losses() -> Vec<(&'static str, GradCheck)> {
    let rendered = random_image(W, H, 21);
    let target = random_image(W, H, 22);
    let mut r = rng(23);
    let mask = Mask::from_data(W, H, (0..W * H).map(|_| r.gen_bool(0.8)).collect());
    let mut res = Vec::new();

    res.push((
        "loss rec",
        check_gradient(&rendered.data, 1e-6, |x| rec_loss(&image_with(&rendered, x), &target, Some(&mask), 0.8).unwrap().0, |x| {
            rec_loss(&image_with(&rendered, x), &target, Some(&mask), 0.8).unwrap().1
        }),
    ));

    let d_hat: Vec<f64> = (0..W * H).map(|_| r.gen_range(0.5..5.0)).collect();
    let d_ref = GrayImage::from_data(W, H, (0..W * H).map(|_| r.gen_range(0.0..1.0)).collect());
    let gray = |x: &[f64]| GrayImage::from_data(W, H, x.to_vec());
    res.push((
        "loss depth",
        check_gradient(&d_hat, 1e-6, |x| depth_loss(&gray(x), &d_ref).unwrap().0, |x| depth_loss(&gray(x), &d_ref).unwrap().1),
    ));

    let n = 12;
    let z: Vec<f64> = (0..n).map(|_| r.gen_range(0.5..4.0)).collect();
    let mut pv = Vec::new();
    for _ in 0..n {
        let t: Vec<f64> = (0..6).map(|_| r.gen_range(0.2..0.9)).collect();
        let beta: Vec<f64> = (0..6).map(|_| r.gen_range(0.1..1.0)).collect();
        let b: Vec<f64> = (0..3).map(|_| r.gen_range(0.0..1.0)).collect();
        pv.extend(t.iter().chain(&beta).chain(&b));
    }
    let unpack = |x: &[f64]| -> (Vec<MediumParams>, Vec<f64>) {
        (x[..15 * n].chunks_exact(15).map(params_from).collect(), x[15 * n..].to_vec())
    };
    let x0: Vec<f64> = pv.iter().chain(&z).copied().collect();
    res.push((
        "loss channel alignment",
        check_gradient(&x0, 1e-6, |x| {
            let (p, z) = unpack(x);
            ca_loss(&p, &z).0
        }, |x| {
            let (p, z) = unpack(x);
            let g = ca_loss(&p, &z).1;
            g.d_params.iter().flat_map(params_to).chain(g.d_z).collect()
        }),
    ));

    res.push((
        "loss gray-world",
        check_gradient(&rendered.data, 1e-6, |x| gray_world_loss(&image_with(&rendered, x)).0, |x| {
            gray_world_loss(&image_with(&rendered, x)).1
        }),
    ));

    // Total: image feeds reconstruction and gray-world, depth feeds L_d.
    let w = LossWeights::default();
    let split = |x: &[f64]| (image_with(&rendered, &x[..3 * W * H]), gray(&x[3 * W * H..]));
    let x1: Vec<f64> = rendered.data.iter().chain(&d_hat).copied().collect();
    res.push((
        "loss total",
        check_gradient(&x1, 1e-6, |x| {
            let (img, d) = split(x);
            let c = LossComponents {
                rec: rec_loss(&img, &target, Some(&mask), w.lambda).unwrap().0,
                depth: depth_loss(&d, &d_ref).unwrap().0,
                ca: 0.0,
                gray: gray_world_loss(&img).0,
            };
            total_loss(&c, &w, Phase::Main).total
        }, |x| {
            let (img, d) = split(x);
            let (lr, gr) = rec_loss(&img, &target, Some(&mask), w.lambda).unwrap();
            let (ld, gd) = depth_loss(&d, &d_ref).unwrap();
            let (lg, gg) = gray_world_loss(&img);
            let route = total_loss(&LossComponents { rec: lr, depth: ld, ca: 0.0, gray: lg }, &w, Phase::Main);
            gr.iter()
                .zip(&gg)
                .map(|(a, b)| route.rec * a + route.gray * b)
                .chain(gd.iter().map(|v| route.depth * v))
                .collect()
        }),
    ));
    res
}

/// Every check of the gradient suite.
pub fn all() -> Vec<(&'static str, GradCheck)> {
    let mut v = rasterizer();
    v.extend(medium_mlp());
    v.extend(losses());
    v
}

pub const TOL64: f64 = 1e-6;
pub const TOL32: f64 = 1e-3;
