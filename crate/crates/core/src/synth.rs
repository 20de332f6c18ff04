//! Synthetic underwater scenes with known geometry and medium, written in
//! the same layout [`crate::scene_io::load_colmap`] reads, plus a
//! least-squares inversion of the formation model.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Point3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::Camera;
use crate::gaussian::GaussianCloud;
use crate::image::{GrayImage, Mask, RgbImage};
use crate::pipeline::{forward, RenderMode};
use crate::scene_io::{
    save_depth_f32, split_indices, write_colmap, ColmapCamera, ColmapImage, ColmapPoint, ColmapScene,
    SceneBundle, SceneError, View,
};

/// Minimum `1 − T_final` for a pixel to count as fully covered.
pub const FULL_COVERAGE: f64 = 0.999;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("depth range too small to separate attenuation from backscatter")]
    InsufficientDepthVariation,
    #[error("no valid samples")]
    NoSamples,
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("cannot write ground truth: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistractorSpec {
    /// Side of the square in pixels.
    pub size: usize,
    /// Top-left corner at the first and last distractor view (pixels).
    pub start: [f64; 2],
    pub end: [f64; 2],
    pub color: [f64; 3],
    /// Fraction of training views that show the distractor.
    pub fraction: f64,
}

/// Enclosing sphere of flat Gaussians around the volume center, so that every
/// view is fully covered.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackdropSpec {
    pub radius: f64,
    /// Taken out of `n_gaussians`.
    pub count: usize,
    /// In-plane scale of each disc; the normal axis is a tenth of it.
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSceneSpec {
    pub seed: u64,
    pub n_gaussians: usize,
    /// Axis-aligned bounds of the Gaussian centers.
    pub volume: [[f64; 3]; 2],
    /// Range of per-axis Gaussian scales.
    pub scale_range: [f64; 2],
    pub beta_d: [f64; 3],
    pub beta_b: [f64; 3],
    pub b: [f64; 3],
    pub n_views: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Cameras alternate between these two distances from the volume center.
    pub camera_distances: [f64; 2],
    pub n_init_points: usize,
    /// Standard deviation of the initial-point jitter.
    pub init_jitter: f64,
    /// Additive Gaussian noise on the underwater images.
    pub noise_sigma: f64,
    pub distractor: Option<DistractorSpec>,
    pub backdrop: Option<BackdropSpec>,
}

impl Default for SynthSceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_gaussians: 500,
            volume: [[-1.0; 3], [1.0; 3]],
            scale_range: [0.04, 0.12],
            beta_d: [0.4, 0.2, 0.1],
            beta_b: [0.3, 0.3, 0.3],
            b: [0.1, 0.3, 0.5],
            n_views: 12,
            width: 64,
            height: 64,
            focal: 70.0,
            camera_distances: [3.0, 5.0],
            n_init_points: 250,
            init_jitter: 0.05,
            noise_sigma: 0.0,
            distractor: None,
            backdrop: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewTruth {
    pub name: String,
    /// `[x0, y0, x1, y1)` of the distractor square, if shown.
    pub distractor_rect: Option<[usize; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub beta_d: [f64; 3],
    pub beta_b: [f64; 3],
    pub b: [f64; 3],
    pub views: Vec<ViewTruth>,
}

/// A generated scene with every hidden quantity exposed.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub bundle: SceneBundle,
    pub truth: GroundTruth,
    pub cloud: GaussianCloud,
    pub clean: Vec<RgbImage>,
    /// Underwater images before distractor compositing and noise.
    pub static_targets: Vec<RgbImage>,
    /// Raw blended distance per pixel.
    pub depth: Vec<GrayImage>,
    /// Per-pixel `1 − T_final` of the clean render.
    pub coverage: Vec<GrayImage>,
    /// `true` on distractor pixels.
    pub distractor_masks: Vec<Option<Mask>>,
}

/// `I = J·e^{−β_d z} + b·(1 − e^{−β_b z})`, per channel.
pub fn formation(j: [f64; 3], z: f64, beta_d: [f64; 3], beta_b: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|c| j[c] * (-beta_d[c] * z).exp() + b[c] * (1.0 - (-beta_b[c] * z).exp()))
}

fn random_rotation(rng: &mut impl Rng) -> [f64; 4] {
    let n = Normal::new(0.0, 1.0).expect("valid normal");
    let q: [f64; 4] = std::array::from_fn(|_| n.sample(rng));
    crate::gaussian::normalize_quat(q)
}

/// Camera ring around the volume center, alternating near and far, with a
/// small alternating elevation.
pub fn ring_cameras(spec: &SynthSceneSpec) -> Vec<Camera> {
    let lo = Vector3::from(spec.volume[0]);
    let hi = Vector3::from(spec.volume[1]);
    let center = (lo + hi) / 2.0;
    (0..spec.n_views)
        .map(|k| {
            let phi = 2.0 * std::f64::consts::PI * k as f64 / spec.n_views as f64;
            let r = spec.camera_distances[k % 2];
            let elev: f64 = if (k / 2) % 2 == 0 { 0.25 } else { -0.15 };
            let eye = center + r * Vector3::new(phi.cos() * elev.cos(), phi.sin() * elev.cos(), elev.sin());
            Camera::new(
                k as u32 + 1,
                spec.width,
                spec.height,
                spec.focal,
                spec.focal,
                spec.width as f64 / 2.0,
                spec.height as f64 / 2.0,
            )
            .look_at(Point3::from(eye), Point3::from(center), Vector3::z())
        })
        .collect()
}

/// Ground truth of one camera: the clean render, the medium applied per
/// pixel at the blended distance, the blended depth and the coverage.
#[derive(Debug, Clone)]
pub struct OracleView {
    pub clean: RgbImage,
    pub underwater: RgbImage,
    pub depth: GrayImage,
    pub coverage: GrayImage,
}

/// Renders the oracle cloud from any camera. Uncovered pixels see the
/// background light `b` from infinitely far away.
pub fn oracle_view(spec: &SynthSceneSpec, cloud: &GaussianCloud, cam: &Camera) -> OracleView {
    let vr = forward(cloud, None, cam, 0, RenderMode::Clean);
    let (w, h) = (cam.width, cam.height);
    let j = vr.out.image;
    let mut img = RgbImage::new(w, h);
    let mut cov = GrayImage::new(w, h);
    for p in 0..w * h {
        let a = 1.0 - vr.out.final_transmittance[p];
        cov.data[p] = a;
        let z = if a > 1e-6 { vr.out.depth.data[p] / a } else { 0.0 };
        for c in 0..3 {
            let td = (-spec.beta_d[c] * z).exp();
            let tb = (-spec.beta_b[c] * z).exp();
            img.data[3 * p + c] = j.data[3 * p + c] * td + spec.b[c] * (a * (1.0 - tb) + (1.0 - a));
        }
    }
    OracleView { clean: j, underwater: img, depth: vr.out.depth, coverage: cov }
}

/// Generates the scene. Deterministic in `spec.seed`.
pub fn generate(spec: &SynthSceneSpec) -> SynthScene {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut cloud = GaussianCloud::empty(0);
    let [lo, hi] = spec.volume;
    let (smin, smax) = (spec.scale_range[0].ln(), spec.scale_range[1].ln());
    let n_shell = spec.backdrop.map_or(0, |b| b.count.min(spec.n_gaussians));
    for _ in 0..spec.n_gaussians - n_shell {
        let pos: [f64; 3] = std::array::from_fn(|a| rng.gen_range(lo[a]..=hi[a]));
        let log_scale: [f64; 3] = std::array::from_fn(|_| rng.gen_range(smin..=smax));
        let rgb: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.95));
        let rot = random_rotation(&mut rng);
        cloud.push(pos, rot, log_scale, 0.99, rgb);
    }
    if let Some(bd) = spec.backdrop {
        let center = (Vector3::from(lo) + Vector3::from(hi)) / 2.0;
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        for k in 0..n_shell {
            // Fibonacci sphere
            let nz = 1.0 - 2.0 * (k as f64 + 0.5) / n_shell as f64;
            let rho = (1.0 - nz * nz).sqrt();
            let phi = golden * k as f64;
            let n = Vector3::new(rho * phi.cos(), rho * phi.sin(), nz);
            let q = UnitQuaternion::rotation_between(&Vector3::z(), &n)
                .unwrap_or_else(|| UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI));
            let pos = center + bd.radius * n;
            let ls = bd.scale.ln();
            let rgb: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.95));
            cloud.push(pos.into(), [q.w, q.i, q.j, q.k], [ls, ls, ls - 10f64.ln()], 0.99, rgb);
        }
    }
    cloud.quantize();

    let cameras = ring_cameras(spec);
    let (train, test) = split_indices(spec.n_views);
    let distractor_views: Vec<usize> = match &spec.distractor {
        Some(d) => {
            let m = ((train.len() as f64 * d.fraction).round() as usize).min(train.len());
            // spread evenly over the training views
            (0..m).map(|k| train[k * train.len() / m.max(1)]).collect()
        }
        None => Vec::new(),
    };

    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("valid normal");
    let mut views = Vec::new();
    let mut clean = Vec::new();
    let mut static_targets = Vec::new();
    let mut depth = Vec::new();
    let mut coverage = Vec::new();
    let mut masks = Vec::new();
    let mut truth_views = Vec::new();
    for (k, cam) in cameras.iter().enumerate() {
        let OracleView { clean: j, underwater, depth: view_depth, coverage: cov } = oracle_view(spec, &cloud, cam);
        let mut img = underwater;
        static_targets.push(img.clone());
        let name = format!("{:03}.png", k);
        let mut rect = None;
        let mut mask = None;
        if let (Some(d), Some(pos)) =
            (&spec.distractor, distractor_views.iter().position(|&v| v == k))
        {
            let m = distractor_views.len();
            let t = if m > 1 { pos as f64 / (m - 1) as f64 } else { 0.0 };
            let x0 = (d.start[0] + t * (d.end[0] - d.start[0])).round().max(0.0) as usize;
            let y0 = (d.start[1] + t * (d.end[1] - d.start[1])).round().max(0.0) as usize;
            let x1 = (x0 + d.size).min(spec.width);
            let y1 = (y0 + d.size).min(spec.height);
            let mut mk = Mask::new(spec.width, spec.height, false);
            for y in y0..y1 {
                for x in x0..x1 {
                    img.set_pixel(x, y, d.color);
                    mk.set(x, y, true);
                }
            }
            rect = Some([x0, y0, x1, y1]);
            mask = Some(mk);
        }
        if spec.noise_sigma > 0.0 {
            for v in &mut img.data {
                *v += noise.sample(&mut rng);
            }
        }
        img.clamp01();
        let depth_norm = view_depth.min_max_normalized();
        views.push(View { name: name.clone(), camera: k, image: img, depth: Some(depth_norm) });
        truth_views.push(ViewTruth { name, distractor_rect: rect });
        clean.push(j);
        depth.push(view_depth);
        coverage.push(cov);
        masks.push(mask);
    }

    let jitter = Normal::new(0.0, spec.init_jitter.max(0.0)).expect("valid normal");
    let mut init_points = Vec::with_capacity(spec.n_init_points);
    for _ in 0..spec.n_init_points {
        let i = rng.gen_range(0..cloud.len());
        let p = cloud.positions[i];
        let pos: [f64; 3] = std::array::from_fn(|a| p[a] + jitter.sample(&mut rng));
        let k = cloud.sh(i);
        let rgb = [0, 1, 2].map(|c| crate::sh::dc_to_rgb(k[c]).clamp(0.0, 1.0));
        init_points.push((pos, rgb));
    }

    SynthScene {
        bundle: SceneBundle { cameras, views, init_points, train, test },
        truth: GroundTruth {
            seed: spec.seed,
            beta_d: spec.beta_d,
            beta_b: spec.beta_b,
            b: spec.b,
            views: truth_views,
        },
        cloud,
        clean,
        static_targets,
        depth,
        coverage,
        distractor_masks: masks,
    }
}

/// Writes the scene as a COLMAP text directory with `images/`, `depths/`
/// (raw `f32` distance planes), `clean/`, `masks/` and `ground_truth.json`.
pub fn write_scene(scene: &SynthScene, dir: &Path) -> Result<(), SynthError> {
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| SceneError::Io { path: p, source }
    };
    for sub in ["images", "depths", "clean", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io(&p))?;
    }
    let cam0 = &scene.bundle.cameras[0];
    let colmap = ColmapScene {
        cameras: vec![ColmapCamera {
            id: 1,
            model: "PINHOLE".into(),
            width: cam0.width,
            height: cam0.height,
            params: vec![cam0.fx, cam0.fy, cam0.cx, cam0.cy],
        }],
        images: scene
            .bundle
            .views
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let c = &scene.bundle.cameras[v.camera];
                let q = c.rotation.quaternion();
                ColmapImage {
                    id: k as u32 + 1,
                    qvec: [q.w, q.i, q.j, q.k],
                    tvec: [c.translation.x, c.translation.y, c.translation.z],
                    camera_id: 1,
                    name: v.name.clone(),
                }
            })
            .collect(),
        points: scene
            .bundle
            .init_points
            .iter()
            .enumerate()
            .map(|(k, (p, c))| ColmapPoint {
                id: k as u64 + 1,
                xyz: *p,
                rgb: c.map(|v| (v * 255.0).round() as u8),
                error: 0.0,
            })
            .collect(),
    };
    write_colmap(&colmap, dir)?;
    for (k, v) in scene.bundle.views.iter().enumerate() {
        let stem = v.name.trim_end_matches(".png");
        v.image.save_png(&dir.join("images").join(&v.name)).map_err(SceneError::from)?;
        scene.clean[k].save_png(&dir.join("clean").join(&v.name)).map_err(SceneError::from)?;
        save_depth_f32(&scene.depth[k], &dir.join("depths").join(format!("{stem}.f32")))?;
        if let Some(m) = &scene.distractor_masks[k] {
            m.save_png(&dir.join("masks").join(&v.name)).map_err(SceneError::from)?;
        }
    }
    let json = serde_json::to_string_pretty(&scene.truth)?;
    let p = dir.join("ground_truth.json");
    fs::write(&p, json).map_err(io(&p))?;
    Ok(())
}

/// One observation for [`invert_medium`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelSample {
    pub i: [f64; 3],
    pub j: [f64; 3],
    pub z: f64,
}

/// Pixels whose clean-render coverage is at least `min_coverage` (use
/// [`FULL_COVERAGE`] for oracle renders); `z` is the blended distance
/// divided by that coverage.
pub fn samples_from_render(
    underwater: &RgbImage,
    clean: &RgbImage,
    depth: &GrayImage,
    final_transmittance: &[f64],
    exclude: Option<&Mask>,
    min_coverage: f64,
) -> Vec<PixelSample> {
    let mut out = Vec::new();
    for p in 0..underwater.num_pixels() {
        let a = 1.0 - final_transmittance[p];
        if a < min_coverage || exclude.is_some_and(|m| m.data[p]) {
            continue;
        }
        out.push(PixelSample {
            i: std::array::from_fn(|c| underwater.data[3 * p + c]),
            j: std::array::from_fn(|c| clean.data[3 * p + c]),
            z: depth.data[p] / a,
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MediumEstimate {
    pub beta_d: [f64; 3],
    pub beta_b: [f64; 3],
    pub b: [f64; 3],
    /// Root-mean-square residual per channel.
    pub rms: [f64; 3],
}

/// Per-channel nonlinear least squares of `I = J e^{−β_d z} + b (1 − e^{−β_b z})`:
/// a coarse grid over `(β_d, β_b)` with closed-form `b`, refined by
/// Levenberg–Marquardt.
pub fn invert_medium(samples: &[PixelSample]) -> Result<MediumEstimate, SynthError> {
    if samples.is_empty() {
        return Err(SynthError::NoSamples);
    }
    let (zmin, zmax) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s.z), hi.max(s.z)));
    if !(zmax - zmin > 1e-3 * zmax.abs().max(1e-9)) {
        return Err(SynthError::InsufficientDepthVariation);
    }
    let mut est = MediumEstimate { beta_d: [0.0; 3], beta_b: [0.0; 3], b: [0.0; 3], rms: [0.0; 3] };
    for c in 0..3 {
        let data: Vec<(f64, f64, f64)> = samples.iter().map(|s| (s.i[c], s.j[c], s.z)).collect();
        let (x, rms) = fit_channel(&data);
        est.beta_d[c] = x[0];
        est.beta_b[c] = x[1];
        est.b[c] = x[2];
        est.rms[c] = rms;
    }
    Ok(est)
}

fn sse(data: &[(f64, f64, f64)], x: [f64; 3]) -> f64 {
    data.iter()
        .map(|&(i, j, z)| {
            let r = j * (-x[0] * z).exp() + x[2] * (1.0 - (-x[1] * z).exp()) - i;
            r * r
        })
        .sum()
}

fn closed_form_b(data: &[(f64, f64, f64)], bd: f64, bb: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for &(i, j, z) in data {
        let u = 1.0 - (-bb * z).exp();
        num += (i - j * (-bd * z).exp()) * u;
        den += u * u;
    }
    if den > 0.0 { num / den } else { 0.0 }
}

fn fit_channel(data: &[(f64, f64, f64)]) -> ([f64; 3], f64) {
    let grid: Vec<f64> = (0..=60).map(|k| 0.01 * (300.0f64).powf(k as f64 / 60.0)).collect();
    let mut best = ([0.0; 3], f64::INFINITY);
    for &bd in &grid {
        for &bb in &grid {
            let b = closed_form_b(data, bd, bb);
            let x = [bd, bb, b];
            let e = sse(data, x);
            if e < best.1 {
                best = (x, e);
            }
        }
    }
    let (mut x, mut err) = best;
    let mut lambda = 1e-3;
    for _ in 0..200 {
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for &(i, j, z) in data {
            let ed = (-x[0] * z).exp();
            let eb = (-x[1] * z).exp();
            let r = j * ed + x[2] * (1.0 - eb) - i;
            let g = Vector3::new(-j * z * ed, x[2] * z * eb, 1.0 - eb);
            jtj += g * g.transpose();
            jtr += g * r;
        }
        let mut improved = false;
        for _ in 0..20 {
            let mut a = jtj;
            for k in 0..3 {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = a.lu().solve(&(-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let cand = [x[0] + step[0], x[1] + step[1], x[2] + step[2]];
            let e = sse(data, cand);
            if e.is_finite() && e < err {
                let rel = (err - e) / err.max(1e-300);
                x = cand;
                err = e;
                lambda = (lambda * 0.3).max(1e-12);
                improved = rel > 1e-15;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (x, (err / data.len() as f64).sqrt())
}
