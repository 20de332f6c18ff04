//! Motion-mask calibration and scoring on distractor fixtures.

use uwsplat::bmm::{build_mask, trim_threshold, BmmConfig, BmmMode, MotionMask};
use uwsplat::metrics::psnr;
use uwsplat::pipeline::RenderMode;
use uwsplat::scene_io::Checkpoint;
use uwsplat::synth::{oracle_view, SynthScene, SynthSceneSpec};
use uwsplat::Camera;
use nalgebra::{Point3, Vector3};
use uwsplat::train::{render_view, TrainConfig, Trainer};
use uwsplat::{GrayImage, Mask};

use super::scenes::DISTRACTOR_COLOR;

/// Residual map and mask of one main-phase iteration.
pub struct MaskRecord {
    pub view: usize,
    pub mask: MotionMask,
}

/// Trains with BMM enabled, keeping the masks of the final `record_last`
/// iterations.
pub fn train_recording(scene: &SynthScene, cfg: &TrainConfig, record_last: usize) -> (Checkpoint, Vec<MaskRecord>) {
    let mut t = Trainer::new(&scene.bundle, TrainConfig { dynamic: true, ..cfg.clone() }).expect("valid config");
    let mut records = Vec::new();
    for _ in 0..cfg.iterations {
        let row = t.step().expect("training step");
        if row.iteration + record_last > cfg.iterations {
            if let Some(m) = t.last_mask.take() {
                records.push(MaskRecord { view: row.view, mask: m });
            }
        }
    }
    (t.checkpoint(), records)
}

/// Rates over the recorded masks: the fraction of ground-truth distractor
/// pixels excluded from ω (coverage) and the fraction of static pixels
/// excluded from ω (false flags).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskRates {
    pub coverage: f64,
    pub false_flags: f64,
}

pub fn rates<'a>(scene: &SynthScene, masks: impl IntoIterator<Item = (usize, &'a Mask)>) -> MaskRates {
    let (mut hit, mut moving, mut flagged, mut stat) = (0usize, 0usize, 0usize, 0usize);
    for (view, omega) in masks {
        let gt = scene.distractor_masks[view].as_ref();
        for p in 0..omega.data.len() {
            if gt.is_some_and(|m| m.data[p]) {
                moving += 1;
                hit += !omega.data[p] as usize;
            } else {
                stat += 1;
                flagged += !omega.data[p] as usize;
            }
        }
    }
    MaskRates { coverage: hit as f64 / moving.max(1) as f64, false_flags: flagged as f64 / stat.max(1) as f64 }
}

/// Replays the threshold carry-over on recorded residuals under `cfg`.
pub fn replay(records: &[MaskRecord], cfg: &BmmConfig) -> Vec<(usize, Mask)> {
    let mut out = Vec::new();
    let mut t_eps: Option<f64> = None;
    for r in records {
        let eps: &GrayImage = &r.mask.residual;
        if let Some(t) = t_eps {
            out.push((r.view, build_mask(eps.clone(), t, cfg, BmmMode::Full).omega));
        }
        t_eps = Some(trim_threshold(eps, cfg.trim_quantile));
    }
    out
}

/// Grid search for the mask parameters with the widest margin to the
/// coverage (≥ 90%) and false-flag (≤ 10%) targets on the recorded residuals.
pub fn calibrate(scene: &SynthScene, records: &[MaskRecord]) -> (BmmConfig, MaskRates) {
    let mut best: Option<(f64, BmmConfig, MaskRates)> = None;
    for rho in [0.8, 0.85, 0.9, 0.93, 0.95, 0.97] {
        for t_star in [0.3, 0.5, 0.7] {
            for t_r in [0.6, 0.7, 0.8, 0.9, 0.95] {
                let cfg = BmmConfig { trim_quantile: rho, t_star, t_r };
                let masks = replay(records, &cfg);
                let r = rates(scene, masks.iter().map(|(v, m)| (*v, m)));
                let score = (r.coverage - 0.9).min(0.1 - r.false_flags);
                if best.as_ref().is_none_or(|b| score > b.0) {
                    best = Some((score, cfg, r));
                }
            }
        }
    }
    let (_, cfg, r) = best.expect("non-empty grid");
    (cfg, r)
}

/// Mean PSNR against the distractor-free targets over the training views
/// that showed the distractor, excluding the distractor pixels.
pub fn static_psnr(ckpt: &Checkpoint, scene: &SynthScene) -> f64 {
    let mut v = Vec::new();
    for &vi in &scene.bundle.train {
        let Some(gt) = &scene.distractor_masks[vi] else { continue };
        let cam = &scene.bundle.cameras[scene.bundle.views[vi].camera];
        let (img, _) = render_view(ckpt, cam, RenderMode::Underwater);
        let valid = Mask::from_data(gt.width, gt.height, gt.data.iter().map(|&b| !b).collect());
        v.push(psnr(&img, &scene.static_targets[vi], Some(&valid)).expect("valid pixels"));
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Novel cameras beside each distractor-bearing training pose: shifted
/// sideways by `offset` (both directions), still aimed at the volume center.
pub fn novel_cameras(scene: &SynthScene, offset: f64) -> Vec<Camera> {
    let target = Point3::origin();
    let mut cams = Vec::new();
    for (vi, m) in scene.distractor_masks.iter().enumerate() {
        if m.is_none() {
            continue;
        }
        let cam = &scene.bundle.cameras[scene.bundle.views[vi].camera];
        let eye = cam.center();
        let side = Vector3::new(-eye.y, eye.x, 0.0).normalize();
        for s in [-1.0, 1.0] {
            cams.push(cam.clone().look_at(Point3::from(eye + s * offset * side), target, Vector3::z()));
        }
    }
    cams
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt()
}

/// Pixels inside the ground-truth distractor masks whose render is pulled
/// toward the distractor color: closer to it than the distractor-free truth
/// by at least `margin`. Rendered at every distractor-bearing view.
pub fn distractor_imprint(ckpt: &Checkpoint, scene: &SynthScene, margin: f64) -> usize {
    let mut n = 0;
    for (vi, gt) in scene.distractor_masks.iter().enumerate() {
        let Some(gt) = gt else { continue };
        let cam = &scene.bundle.cameras[scene.bundle.views[vi].camera];
        let (img, _) = render_view(ckpt, cam, RenderMode::Underwater);
        let truth = &scene.static_targets[vi];
        for p in (0..img.num_pixels()).filter(|&p| gt.data[p]) {
            let px = |im: &uwsplat::RgbImage| [im.data[3 * p], im.data[3 * p + 1], im.data[3 * p + 2]];
            if dist(px(&img), DISTRACTOR_COLOR) < dist(px(truth), DISTRACTOR_COLOR) - margin {
                n += 1;
            }
        }
    }
    n
}

fn distractor_colored(c: [f64; 3]) -> bool {
    (0..3).all(|k| (c[k] - DISTRACTOR_COLOR[k]).abs() < 0.2)
}

/// Rendered pixels that look like the distractor where the distractor-free
/// ground truth does not, over the given cameras.
pub fn distractor_pixels(ckpt: &Checkpoint, scene: &SynthScene, spec: &SynthSceneSpec, cams: &[Camera]) -> usize {
    let mut n = 0;
    for cam in cams {
        let (img, _) = render_view(ckpt, cam, RenderMode::Underwater);
        let truth = oracle_view(spec, &scene.cloud, cam).underwater;
        for p in 0..img.num_pixels() {
            let px = |im: &uwsplat::RgbImage| [im.data[3 * p], im.data[3 * p + 1], im.data[3 * p + 2]];
            if distractor_colored(px(&img)) && !distractor_colored(px(&truth)) {
                n += 1;
            }
        }
    }
    n
}
