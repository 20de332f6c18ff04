//! Physics-compensated adaptive density control.
//!
//! Screen-space position gradients of attenuated Gaussians are scaled back by
//! `1/T_D` (capped), damped near the camera by `S_z(z) = min(1, z/z_ref)`, and
//! averaged over covered pixels rather than views. Gaussians whose average
//! exceeds `tau` are cloned (small) or split in two (large).

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussian::{logit, normalize_quat, quat_to_matrix, GaussianCloud};
use crate::projection::Splat2D;

#[derive(Debug, Error, PartialEq)]
pub enum DensityError {
    #[error("pruning removed every Gaussian")]
    CloudEmptyAfterPrune,
    #[error("invalid density control config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityControlConfig {
    /// Average gradient threshold (pixel units).
    pub tau: f64,
    pub densify_interval: usize,
    pub densify_start: usize,
    pub densify_end: usize,
    pub prune_opacity: f64,
    /// Screen-radius pruning threshold in pixels; 0 disables it.
    pub max_screen_radius_px: f64,
    pub comp_clamp_max: f64,
    /// Reference depth of the near-camera damping; `None` means 10% of the
    /// scene radius.
    pub z_damp_ref: Option<f64>,
    pub enable_physics_comp: bool,
    pub enable_pixel_weighting: bool,
    pub enable_z_damp: bool,
    /// Gaussians with max scale at or below this fraction of the scene
    /// radius are cloned; larger ones are split.
    pub clone_scale_fraction: f64,
    pub split_scale_divisor: f64,
    /// Opacities are reset to at most 0.01 every this many iterations (0 = never).
    pub opacity_reset_interval: usize,
}

impl Default for DensityControlConfig {
    fn default() -> Self {
        Self {
            tau: 2e-4,
            densify_interval: 100,
            densify_start: 500,
            densify_end: 7500,
            prune_opacity: 0.005,
            max_screen_radius_px: 0.0,
            comp_clamp_max: 20.0,
            z_damp_ref: None,
            enable_physics_comp: true,
            enable_pixel_weighting: true,
            enable_z_damp: true,
            clone_scale_fraction: 0.01,
            split_scale_divisor: 1.6,
            opacity_reset_interval: 3000,
        }
    }
}

impl DensityControlConfig {
    pub fn validate(&self) -> Result<(), DensityError> {
        let bad = |m: &str| Err(DensityError::InvalidConfig(m.to_string()));
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if self.densify_interval == 0 {
            return bad("densify_interval must be positive");
        }
        if self.densify_start > self.densify_end {
            return bad("densify_start must not exceed densify_end");
        }
        if !(self.comp_clamp_max >= 1.0) {
            return bad("comp_clamp_max must be at least 1");
        }
        if !(self.split_scale_divisor > 0.0) {
            return bad("split_scale_divisor must be positive");
        }
        Ok(())
    }

    pub fn z_ref(&self, scene_radius: f64) -> f64 {
        self.z_damp_ref.unwrap_or(0.1 * scene_radius)
    }

    /// True when `iteration` (1-based) triggers a densification event.
    pub fn is_event(&self, iteration: usize) -> bool {
        iteration > self.densify_start
            && iteration <= self.densify_end
            && iteration % self.densify_interval == 0
    }
}

/// Near-camera damping `S_z(z) = min(1, z / z_ref)`.
pub fn depth_damping(z: f64, z_ref: f64) -> f64 {
    if z_ref <= 0.0 {
        1.0
    } else {
        (z / z_ref).min(1.0).max(0.0)
    }
}

/// `g' = g · min(1/T_D, clamp) · S_z(z)`, with each factor switchable.
pub fn compensate_gradient(
    grad_norm: f64,
    t_d_mean: f64,
    z: f64,
    z_ref: f64,
    cfg: &DensityControlConfig,
) -> f64 {
    let comp = if cfg.enable_physics_comp {
        if t_d_mean > 0.0 {
            (1.0 / t_d_mean).min(cfg.comp_clamp_max)
        } else {
            cfg.comp_clamp_max
        }
    } else {
        1.0
    };
    let damp = if cfg.enable_z_damp { depth_damping(z, z_ref) } else { 1.0 };
    grad_norm * comp * damp
}

/// One Gaussian's contribution from a single rendered view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewStat {
    pub gaussian: usize,
    pub covered_pixels: u32,
    /// Compensated gradient norm `g'`.
    pub grad: f64,
    pub screen_radius: f64,
}

/// Per-splat statistics for one rendered view. The screen-space gradient is
/// rescaled to NDC units (`∂/∂ndc = ∂/∂px · size/2`) so `tau` is
/// resolution-independent, then compensated.
pub fn view_stats(
    splats: &[Splat2D],
    covered_pixels: &[u32],
    d_mean2d: &[[f64; 2]],
    t_d_means: &[f64],
    (width, height): (usize, usize),
    z_ref: f64,
    cfg: &DensityControlConfig,
) -> Vec<ViewStat> {
    splats
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let g = d_mean2d[k];
            let g_ndc = (g[0] * 0.5 * width as f64).hypot(g[1] * 0.5 * height as f64);
            ViewStat {
                gaussian: s.index,
                covered_pixels: covered_pixels[k],
                grad: compensate_gradient(g_ndc, t_d_means[k], s.depth, z_ref, cfg),
                screen_radius: s.radius,
            }
        })
        .collect()
}

/// Adds one view's statistics to the cloud accumulators.
pub fn accumulate(cloud: &mut GaussianCloud, stats: &[ViewStat], cfg: &DensityControlConfig) {
    for s in stats {
        let i = s.gaussian;
        cloud.max_screen_radius[i] = cloud.max_screen_radius[i].max(s.screen_radius);
        if s.covered_pixels == 0 {
            continue;
        }
        if cfg.enable_pixel_weighting {
            let n = s.covered_pixels as f64;
            cloud.grad_accum[i] += s.grad * n;
            cloud.coverage_accum[i] += n;
        } else {
            cloud.grad_accum[i] += s.grad;
            cloud.coverage_accum[i] += 1.0;
        }
    }
}

/// Average accumulated gradient per Gaussian; zero when never covered.
pub fn average_gradients(cloud: &GaussianCloud) -> Vec<f64> {
    cloud
        .grad_accum
        .iter()
        .zip(&cloud.coverage_accum)
        .map(|(&g, &n)| if n > 0.0 { g / n } else { 0.0 })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    /// For each row of the new cloud, the old row it continues (optimizer
    /// state carries over) or `None` for a newly created Gaussian.
    pub origins: Vec<Option<usize>>,
}

/// Clones, splits and prunes according to the accumulated averages, then
/// zeroes the accumulators.
pub fn densify_and_prune<R: Rng>(
    cloud: &mut GaussianCloud,
    cfg: &DensityControlConfig,
    scene_radius: f64,
    rng: &mut R,
) -> Result<DensifyReport, DensityError> {
    let avg = average_gradients(cloud);
    let n = cloud.len();
    let clone_limit = cfg.clone_scale_fraction * scene_radius;
    let max_scale = |c: &GaussianCloud, i: usize| c.scale(i).into_iter().fold(f64::MIN, f64::max);

    let mut keep_rows: Vec<usize> = Vec::with_capacity(n);
    let mut origins: Vec<Option<usize>> = Vec::with_capacity(n);
    let mut new_rows: Vec<usize> = Vec::new();
    let mut split_parents: Vec<usize> = Vec::new();
    for i in 0..n {
        let selected = avg[i] >= cfg.tau;
        if selected && max_scale(cloud, i) > clone_limit {
            split_parents.push(i);
            continue;
        }
        keep_rows.push(i);
        origins.push(Some(i));
        if selected {
            new_rows.push(i);
        }
    }
    let cloned = new_rows.len();
    let mut next = cloud.gather(&keep_rows);
    let clones = cloud.gather(&new_rows);
    append(&mut next, &clones);
    origins.extend(std::iter::repeat_n(None, cloned));

    for &p in &split_parents {
        let mut children = cloud.gather(&[p, p]);
        let r = quat_to_matrix(normalize_quat(cloud.rotations[p]));
        let s = Vector3::from(cloud.scale(p));
        let mu = cloud.position(p);
        for c in 0..2 {
            let noise = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            let pos = mu + r * s.component_mul(&noise);
            children.positions[c] = [pos.x, pos.y, pos.z];
            children.log_scales[c] = cloud.log_scales[p].map(|v| v - cfg.split_scale_divisor.ln());
        }
        append(&mut next, &children);
        origins.extend([None, None]);
    }

    // prune
    let mut survivors = Vec::with_capacity(next.len());
    for i in 0..next.len() {
        let transparent = next.opacity(i) < cfg.prune_opacity;
        let too_big =
            cfg.max_screen_radius_px > 0.0 && next.max_screen_radius[i] > cfg.max_screen_radius_px;
        if !(transparent || too_big) {
            survivors.push(i);
        }
    }
    let pruned = next.len() - survivors.len();
    if survivors.is_empty() {
        return Err(DensityError::CloudEmptyAfterPrune);
    }
    let mut pruned_cloud = next.gather(&survivors);
    pruned_cloud.reset_accumulators();
    let origins = survivors.iter().map(|&i| origins[i]).collect();
    *cloud = pruned_cloud;
    Ok(DensifyReport { cloned, split: split_parents.len(), pruned, origins })
}

fn append(dst: &mut GaussianCloud, src: &GaussianCloud) {
    dst.positions.extend_from_slice(&src.positions);
    dst.rotations.extend_from_slice(&src.rotations);
    dst.log_scales.extend_from_slice(&src.log_scales);
    dst.logit_opacities.extend_from_slice(&src.logit_opacities);
    dst.sh_coeffs.extend_from_slice(&src.sh_coeffs);
    dst.grad_accum.extend_from_slice(&src.grad_accum);
    dst.coverage_accum.extend_from_slice(&src.coverage_accum);
    dst.max_screen_radius.extend_from_slice(&src.max_screen_radius);
}

/// Caps every opacity at `max_opacity`. Returns the rows that changed.
pub fn reset_opacity(cloud: &mut GaussianCloud, max_opacity: f64) -> Vec<usize> {
    let cap = logit(max_opacity);
    let mut changed = Vec::new();
    for (i, l) in cloud.logit_opacities.iter_mut().enumerate() {
        if *l > cap {
            *l = cap;
            changed.push(i);
        }
    }
    changed
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> DensityControlConfig {
        DensityControlConfig { tau: 1e-3, z_damp_ref: Some(1.0), ..Default::default() }
    }

    fn cloud_with(scales: &[f64], opacities: &[f64]) -> GaussianCloud {
        let mut c = GaussianCloud::empty(0);
        for (i, (&s, &o)) in scales.iter().zip(opacities).enumerate() {
            c.push([i as f64, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0], [s.ln(); 3], o, [0.5; 3]);
        }
        c
    }

    #[test]
    fn compensation_examples() {
        let c = cfg();
        assert_eq!(compensate_gradient(0.003, 1.0, 2.0, 1.0, &c), 0.003);
        assert!((compensate_gradient(0.001, 0.5, 2.0, 1.0, &c) - 0.002).abs() < 1e-18);
        assert_eq!(compensate_gradient(1.0, 1e-6, 2.0, 1.0, &c), 20.0);
        assert_eq!(compensate_gradient(1.0, 1.0, 0.25, 1.0, &c), 0.25);
        let off = DensityControlConfig { enable_physics_comp: false, enable_z_damp: false, ..c };
        assert_eq!(compensate_gradient(1.0, 0.1, 0.25, 1.0, &off), 1.0);
    }

    #[test]
    fn pixel_weighted_average() {
        let mut cloud = cloud_with(&[0.1], &[0.5]);
        let c = cfg();
        accumulate(
            &mut cloud,
            &[ViewStat { gaussian: 0, covered_pixels: 100, grad: 0.01, screen_radius: 1.0 }],
            &c,
        );
        assert!((average_gradients(&cloud)[0] - 0.01).abs() < 1e-15);
        accumulate(
            &mut cloud,
            &[ViewStat { gaussian: 0, covered_pixels: 300, grad: 0.03, screen_radius: 1.0 }],
            &c,
        );
        assert!((average_gradients(&cloud)[0] - 0.025).abs() < 1e-15);

        let mut by_view = cloud_with(&[0.1], &[0.5]);
        let vc = DensityControlConfig { enable_pixel_weighting: false, ..c };
        for (n, g) in [(100, 0.01), (300, 0.03)] {
            accumulate(
                &mut by_view,
                &[ViewStat { gaussian: 0, covered_pixels: n, grad: g, screen_radius: 1.0 }],
                &vc,
            );
        }
        assert!((average_gradients(&by_view)[0] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn unrendered_gaussian_is_never_densified() {
        let mut cloud = cloud_with(&[0.001], &[0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(average_gradients(&cloud), vec![0.0]);
        let rep = densify_and_prune(&mut cloud, &cfg(), 1.0, &mut rng).unwrap();
        assert_eq!((rep.cloned, rep.split, rep.pruned), (0, 0, 0));
        assert_eq!(cloud.len(), 1);
    }

    #[test]
    fn large_gaussian_splits_in_two() {
        let mut cloud = cloud_with(&[0.5, 0.2], &[0.5, 0.5]);
        cloud.grad_accum = vec![2e-3, 0.0];
        cloud.coverage_accum = vec![1.0, 1.0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rep = densify_and_prune(&mut cloud, &cfg(), 1.0, &mut rng).unwrap();
        assert_eq!((rep.cloned, rep.split, rep.pruned), (0, 1, 0));
        assert_eq!(cloud.len(), 3);
        assert_eq!(rep.origins, vec![Some(1), None, None]);
        for i in 1..3 {
            for s in cloud.scale(i) {
                assert!((s - 0.5 / 1.6).abs() < 1e-12);
            }
        }
        assert!(cloud.grad_accum.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn small_gaussian_clones() {
        let mut cloud = cloud_with(&[0.005], &[0.5]);
        cloud.grad_accum = vec![5e-3];
        cloud.coverage_accum = vec![2.0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rep = densify_and_prune(&mut cloud, &cfg(), 1.0, &mut rng).unwrap();
        assert_eq!((rep.cloned, rep.split), (1, 0));
        assert_eq!(cloud.len(), 2);
        assert_eq!(cloud.positions[0], cloud.positions[1]);
    }

    #[test]
    fn transparent_gaussian_is_pruned() {
        let mut cloud = cloud_with(&[0.1, 0.1], &[0.001, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rep = densify_and_prune(&mut cloud, &cfg(), 1.0, &mut rng).unwrap();
        assert_eq!(rep.pruned, 1);
        assert_eq!(cloud.len(), 1);
        assert!((cloud.opacity(0) - 0.5).abs() < 1e-9);
    }

    #[test]
    fn pruning_everything_is_an_error() {
        let mut cloud = cloud_with(&[0.1], &[0.001]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            densify_and_prune(&mut cloud, &cfg(), 1.0, &mut rng),
            Err(DensityError::CloudEmptyAfterPrune)
        );
    }

    #[test]
    fn event_schedule() {
        let c = DensityControlConfig { densify_start: 100, densify_end: 300, densify_interval: 100, ..cfg() };
        assert!(!c.is_event(100));
        assert!(c.is_event(200));
        assert!(c.is_event(300));
        assert!(!c.is_event(400));
    }
}
