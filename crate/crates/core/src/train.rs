//! Training loop, run configuration, rendering and evaluation.

use std::path::Path;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bmm::{BmmConfig, BmmError, BmmMode, BmmState, MotionMask};
use crate::camera::Camera;
use crate::density::{
    accumulate, densify_and_prune, reset_opacity, view_stats, DensityControlConfig, DensityError,
};
use crate::gaussian::{knn_mean_distance, GaussianCloud};
use crate::image::{GrayImage, Mask, RgbImage};
use crate::losses::{
    ca_loss, depth_loss, gray_world_loss, rec_loss, total_loss, LossComponents, LossError,
    LossWeights, Phase,
};
use crate::medium::{MediumNet, MediumParams};
use crate::metrics::{evaluate_pair, psnr, Metrics, MetricsError};
use crate::optim::{exp_decay, Adam};
use crate::pipeline::{self, CloudGrads, MediumUpstream, RenderMode};
use crate::scene_io::{Checkpoint, SceneBundle};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("loss diverged at iteration {iteration}")]
    DivergedLoss { iteration: usize },
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Mask(#[from] BmmError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("scene has no training views")]
    NoTrainViews,
    #[error("scene has no initial points")]
    NoInitialPoints,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    /// Multiplied by the scene radius.
    pub position_init: f64,
    pub position_final: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub sh_dc: f64,
    pub sh_rest: f64,
    pub mlp: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            rotation: 1e-3,
            scale: 5e-3,
            opacity: 0.05,
            sh_dc: 2.5e-3,
            sh_rest: 2.5e-3 / 20.0,
            mlp: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub warmup_iters: usize,
    pub lr: LearningRates,
    pub lambda: f64,
    pub lambda_d: f64,
    pub lambda_ca: f64,
    pub density: DensityControlConfig,
    pub bmm: BmmConfig,
    pub bmm_mode: BmmMode,
    /// Enables the motion mask (scenes with transient content).
    pub dynamic: bool,
    pub seed: u64,
    pub sh_degree: usize,
    /// Main-phase iterations between SH degree increments.
    pub sh_degree_interval: usize,
    pub init_opacity: f64,
    pub medium_freqs: usize,
    pub medium_hidden: usize,
    /// V1: Gaussian colors only, no medium.
    pub disable_medium: bool,
    /// V2: plain view-averaged densification statistics.
    pub disable_physics_dc: bool,
    /// V3: no depth supervision or channel alignment.
    pub disable_depth_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 15_000,
            warmup_iters: 1_000,
            lr: LearningRates::default(),
            lambda: 0.8,
            lambda_d: 0.05,
            lambda_ca: 0.01,
            density: DensityControlConfig::default(),
            bmm: BmmConfig::default(),
            bmm_mode: BmmMode::Full,
            dynamic: false,
            seed: 0,
            sh_degree: 3,
            sh_degree_interval: 1_000,
            init_opacity: 0.1,
            medium_freqs: crate::medium::DEFAULT_NUM_FREQS,
            medium_hidden: crate::medium::DEFAULT_HIDDEN,
            disable_medium: false,
            disable_physics_dc: false,
            disable_depth_loss: false,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let s = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_toml_str(&s)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.iterations > 0 && self.warmup_iters >= self.iterations {
            return bad("warmup_iters must be smaller than iterations");
        }
        let lr = &self.lr;
        for v in [
            lr.position_init,
            lr.position_final,
            lr.rotation,
            lr.scale,
            lr.opacity,
            lr.sh_dc,
            lr.sh_rest,
            lr.mlp,
        ] {
            if !(v > 0.0) {
                return bad("learning rates must be positive");
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if !(self.lambda_d >= 0.0 && self.lambda_ca >= 0.0) {
            return bad("depth weights must be non-negative");
        }
        if self.sh_degree > crate::sh::MAX_DEGREE {
            return bad("sh_degree must be at most 3");
        }
        if !(self.init_opacity > 0.0 && self.init_opacity < 1.0) {
            return bad("init_opacity must lie in (0, 1)");
        }
        if self.medium_freqs == 0 || self.medium_hidden == 0 {
            return bad("medium network shape must be positive");
        }
        self.density.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.bmm.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> String {
        let s = toml::to_string(self).expect("config serializes");
        Sha256::digest(s.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn weights(&self) -> LossWeights {
        LossWeights { lambda: self.lambda, lambda_d: self.lambda_d, lambda_ca: self.lambda_ca }
    }

    /// Density settings after applying the V2 switch.
    pub fn effective_density(&self) -> DensityControlConfig {
        let mut d = self.density.clone();
        if self.disable_physics_dc {
            d.enable_physics_comp = false;
            d.enable_pixel_weighting = false;
            d.enable_z_damp = false;
        }
        d
    }
}

/// One row of the per-iteration CSV log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub iteration: usize,
    pub phase: &'static str,
    pub view: usize,
    pub total: f64,
    pub rec: f64,
    pub depth: f64,
    pub ca: f64,
    pub gray: f64,
    pub n_gaussians: usize,
    pub inlier_fraction: f64,
    /// Threshold used for this iteration's first mask (+inf before any
    /// residual history).
    pub t_eps: f64,
    /// PSNR of this iteration's render against its target.
    pub psnr: f64,
    /// Standard deviation of the per-Gaussian backscatter color over the
    /// visible Gaussians, averaged over channels (0 without a medium).
    pub backscatter_std: f64,
}

struct Optimizers {
    positions: Adam,
    rotations: Adam,
    scales: Adam,
    opacities: Adam,
    sh_dc: Adam,
    sh_rest: Adam,
    mlp: Option<Adam>,
}

impl Optimizers {
    fn new(cfg: &TrainConfig, cloud: &GaussianCloud, mlp_len: Option<usize>, radius: f64) -> Self {
        let n = cloud.len();
        let nb = cloud.num_basis();
        let eps = 1e-15;
        Self {
            positions: Adam::new(cfg.lr.position_init * radius, eps, 3, 3 * n),
            rotations: Adam::new(cfg.lr.rotation, eps, 4, 4 * n),
            scales: Adam::new(cfg.lr.scale, eps, 3, 3 * n),
            opacities: Adam::new(cfg.lr.opacity, eps, 1, n),
            sh_dc: Adam::new(cfg.lr.sh_dc, eps, 3, 3 * n),
            sh_rest: Adam::new(cfg.lr.sh_rest, eps, 3 * (nb - 1), 3 * (nb - 1) * n),
            mlp: mlp_len.map(|len| Adam::new(cfg.lr.mlp, 1e-8, len, len)),
        }
    }

    fn remap(&mut self, origins: &[Option<usize>]) {
        for a in [
            &mut self.positions,
            &mut self.rotations,
            &mut self.scales,
            &mut self.opacities,
            &mut self.sh_dc,
            &mut self.sh_rest,
        ] {
            a.remap(origins);
        }
    }
}

/// Splits `[channel][basis]` SH rows into DC and rest vectors.
fn split_sh(coeffs: &[f64], nb: usize) -> (Vec<f64>, Vec<f64>) {
    let mut dc = Vec::with_capacity(coeffs.len() / nb);
    let mut rest = Vec::with_capacity(coeffs.len() - coeffs.len() / nb);
    for ch in coeffs.chunks_exact(nb) {
        dc.push(ch[0]);
        rest.extend_from_slice(&ch[1..]);
    }
    (dc, rest)
}

fn merge_sh(coeffs: &mut [f64], nb: usize, dc: &[f64], rest: &[f64]) {
    for (k, ch) in coeffs.chunks_exact_mut(nb).enumerate() {
        ch[0] = dc[k];
        ch[1..].copy_from_slice(&rest[k * (nb - 1)..(k + 1) * (nb - 1)]);
    }
}

/// Builds the initial cloud from the bundle's sparse points.
pub fn init_cloud(bundle: &SceneBundle, cfg: &TrainConfig) -> Result<GaussianCloud, TrainError> {
    if bundle.init_points.is_empty() {
        return Err(TrainError::NoInitialPoints);
    }
    let pts: Vec<[f64; 3]> = bundle.init_points.iter().map(|p| p.0).collect();
    let dist = knn_mean_distance(&pts, 3);
    let mut cloud = GaussianCloud::empty(cfg.sh_degree);
    for ((p, c), d) in bundle.init_points.iter().zip(dist) {
        let s = d.max(1e-7).ln();
        cloud.push(*p, [1.0, 0.0, 0.0, 0.0], [s; 3], cfg.init_opacity, *c);
    }
    cloud.quantize();
    Ok(cloud)
}

/// Distances are divided by this before the medium net's encoding.
pub fn medium_depth_scale(scene_radius: f64) -> f64 {
    2.0 * scene_radius
}

/// Stateful optimizer over one scene.
pub struct Trainer<'a> {
    bundle: &'a SceneBundle,
    cfg: TrainConfig,
    pub cloud: GaussianCloud,
    pub medium: Option<MediumNet>,
    opt: Optimizers,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    pub iteration: usize,
    pub bmm_state: BmmState,
    /// Motion mask of the latest main-phase iteration (dynamic scenes only).
    pub last_mask: Option<MotionMask>,
    scene_radius: f64,
    warned_depth: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(bundle: &'a SceneBundle, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        if bundle.train.is_empty() {
            return Err(TrainError::NoTrainViews);
        }
        let cloud = init_cloud(bundle, &cfg)?;
        let scene_radius = bundle.scene_radius();
        let medium = (!cfg.disable_medium).then(|| {
            MediumNet::with_shape(
                cfg.seed ^ 0x6d65_6469_756d,
                medium_depth_scale(scene_radius),
                cfg.medium_freqs,
                cfg.medium_hidden,
            )
        });
        let opt = Optimizers::new(&cfg, &cloud, medium.as_ref().map(MediumNet::num_params), scene_radius);
        Ok(Self {
            bundle,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            cloud,
            medium,
            opt,
            order: Vec::new(),
            cursor: 0,
            iteration: 0,
            bmm_state: BmmState::default(),
            last_mask: None,
            scene_radius,
            warned_depth: false,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn scene_radius(&self) -> f64 {
        self.scene_radius
    }

    fn next_view(&mut self) -> usize {
        if self.cursor >= self.order.len() {
            self.order = self.bundle.train.clone();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    fn active_degree(&self, phase: Phase) -> usize {
        match phase {
            Phase::Warmup => 0,
            Phase::Main => {
                let main_iter = self.iteration.saturating_sub(self.cfg.warmup_iters + 1);
                let steps = main_iter / self.cfg.sh_degree_interval.max(1);
                steps.min(self.cfg.sh_degree)
            }
        }
    }

    /// Runs one iteration and returns its log row.
    pub fn step(&mut self) -> Result<LogRow, TrainError> {
        self.iteration += 1;
        let it = self.iteration;
        let cfg = self.cfg.clone();
        let phase = if it <= cfg.warmup_iters { Phase::Warmup } else { Phase::Main };
        let vi = self.next_view();
        let bundle = self.bundle;
        let view = &bundle.views[vi];
        let cam = &bundle.cameras[view.camera];
        let degree = self.active_degree(phase);
        let (w, h) = (cam.width, cam.height);

        let vr = pipeline::forward(&self.cloud, self.medium.as_ref(), cam, degree, RenderMode::Underwater);
        let mut comps = LossComponents::default();

        let t_eps = self.bmm_state.t_eps;
        let mask = if phase == Phase::Main && cfg.dynamic {
            Some(self.bmm_state.step(&vr.out.image, &view.image, &cfg.bmm, cfg.bmm_mode)?)
        } else {
            None
        };
        let inlier_fraction = mask.as_ref().map_or(1.0, |m| m.omega.fraction());

        let mut d_image = vec![0.0; w * h * 3];
        if phase == Phase::Main {
            let (l, g) = rec_loss(&vr.out.image, &view.image, mask.as_ref().map(|m| &m.omega), cfg.lambda)?;
            comps.rec = l;
            d_image = g;
        }
        let mut d_depth = None;
        let mut ca = None;
        if !cfg.disable_depth_loss {
            match &view.depth {
                Some(d) => {
                    let (l, g) = depth_loss(&vr.out.depth, d)?;
                    comps.depth = l;
                    d_depth = Some(g);
                }
                None if !self.warned_depth => {
                    warn!("view {} has no pseudo-depth; depth loss skipped", view.name);
                    self.warned_depth = true;
                }
                None => {}
            }
            if let Some((params, _)) = &vr.medium {
                let z: Vec<f64> = vr.splats.iter().map(|s| s.depth).collect();
                let (l, g) = ca_loss(params, &z);
                comps.ca = l;
                ca = Some(g);
            }
        }
        let gray = if phase == Phase::Main && self.medium.is_some() {
            let jr = pipeline::forward(&self.cloud, None, cam, degree, RenderMode::Clean);
            let (l, g) = gray_world_loss(&jr.out.image);
            comps.gray = l;
            Some((jr, g))
        } else {
            None
        };

        let route = total_loss(&comps, &cfg.weights(), phase);
        if !route.total.is_finite() {
            return Err(TrainError::DivergedLoss { iteration: it });
        }
        d_image.iter_mut().for_each(|v| *v *= route.rec);
        if let Some(d) = &mut d_depth {
            d.iter_mut().for_each(|v| *v *= route.depth);
        }
        let ca_scaled = ca.map(|mut g| {
            for p in &mut g.d_params {
                for c in 0..3 {
                    p.t_d[c] *= route.ca;
                    p.t_b[c] *= route.ca;
                    p.beta_d[c] *= route.ca;
                    p.beta_b[c] *= route.ca;
                }
            }
            g.d_z.iter_mut().for_each(|v| *v *= route.ca);
            g
        });

        let mut grads = CloudGrads::zeros(&self.cloud);
        let mut mlp_grads = self.medium.as_ref().map(|m| vec![0.0; m.num_params()]);
        let rg = pipeline::backward(
            &self.cloud,
            self.medium.as_ref(),
            cam,
            &vr,
            &d_image,
            d_depth.as_deref(),
            ca_scaled.as_ref().map(|g| MediumUpstream { d_params: &g.d_params, d_z: &g.d_z }),
            false,
            &mut grads,
            mlp_grads.as_deref_mut(),
        );
        if let Some((jr, mut g)) = gray {
            g.iter_mut().for_each(|v| *v *= route.gray);
            pipeline::backward(&self.cloud, None, cam, &jr, &g, None, None, true, &mut grads, None);
        }
        if !grads.is_finite() || mlp_grads.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(TrainError::DivergedLoss { iteration: it });
        }

        let dcfg = cfg.effective_density();
        if phase == Phase::Main && it <= dcfg.densify_end {
            let z_ref = dcfg.z_ref(self.scene_radius);
            let td = vr.t_d_means();
            let stats = view_stats(&vr.splats, &vr.out.covered_pixels, &rg.d_mean2d, &td, (w, h), z_ref, &dcfg);
            accumulate(&mut self.cloud, &stats, &dcfg);
        }

        self.apply_gradients(phase, &grads, mlp_grads.as_deref());

        if phase == Phase::Main {
            if dcfg.is_event(it) {
                let report = densify_and_prune(&mut self.cloud, &dcfg, self.scene_radius, &mut self.rng)?;
                self.opt.remap(&report.origins);
                self.cloud.quantize();
                debug!(
                    "iteration {it}: cloned {}, split {}, pruned {}, size {}",
                    report.cloned,
                    report.split,
                    report.pruned,
                    self.cloud.len()
                );
            }
            if dcfg.opacity_reset_interval > 0
                && it % dcfg.opacity_reset_interval == 0
                && it < dcfg.densify_end
            {
                let rows = reset_opacity(&mut self.cloud, 0.01);
                self.opt.opacities.reset_rows(&rows);
                self.cloud.quantize();
            }
        }

        self.last_mask = mask;
        Ok(LogRow {
            iteration: it,
            phase: if phase == Phase::Warmup { "warmup" } else { "main" },
            view: vi,
            total: route.total,
            rec: comps.rec,
            depth: comps.depth,
            ca: comps.ca,
            gray: comps.gray,
            n_gaussians: self.cloud.len(),
            inlier_fraction,
            t_eps,
            psnr: psnr(&vr.out.image, &view.image, None).unwrap_or(f64::NAN),
            backscatter_std: vr.medium.as_ref().map_or(0.0, |(p, _)| backscatter_std(p)),
        })
    }

    fn apply_gradients(&mut self, phase: Phase, g: &CloudGrads, mlp: Option<&[f64]>) {
        let cfg = &self.cfg;
        let c = &mut self.cloud;
        let o = &mut self.opt;
        o.positions.lr = exp_decay(
            cfg.lr.position_init * self.scene_radius,
            cfg.lr.position_final * self.scene_radius,
            self.iteration,
            cfg.iterations,
        );
        o.positions.step(c.positions.as_flattened_mut(), g.positions.as_flattened());
        o.opacities.step(&mut c.logit_opacities, &g.logit_opacities);
        if phase == Phase::Main {
            o.rotations.step(c.rotations.as_flattened_mut(), g.rotations.as_flattened());
            o.scales.step(c.log_scales.as_flattened_mut(), g.log_scales.as_flattened());
            let nb = c.num_basis();
            let (mut dc, mut rest) = split_sh(&c.sh_coeffs, nb);
            let (gdc, grest) = split_sh(&g.sh_coeffs, nb);
            o.sh_dc.step(&mut dc, &gdc);
            if nb > 1 {
                o.sh_rest.step(&mut rest, &grest);
            }
            merge_sh(&mut c.sh_coeffs, nb, &dc, &rest);
        }
        if let (Some(net), Some(adam), Some(gm)) = (&mut self.medium, &mut o.mlp, mlp) {
            adam.step(net.params_mut(), gm);
            net.quantize();
        }
        c.normalize_rotations();
        c.quantize();
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            cloud: self.cloud.clone(),
            medium: self.medium.clone(),
            iteration: self.iteration as u64,
            config_hash: self.cfg.hash(),
            scene_radius: self.scene_radius,
        }
    }
}

fn backscatter_std(params: &[MediumParams]) -> f64 {
    let n = params.len() as f64;
    if n == 0.0 {
        return 0.0;
    }
    (0..3)
        .map(|c| {
            let mean = params.iter().map(|p| p.b[c]).sum::<f64>() / n;
            (params.iter().map(|p| (p.b[c] - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .sum::<f64>()
        / 3.0
}

/// Trains for `cfg.iterations` and returns the final checkpoint and log.
pub fn train(bundle: &SceneBundle, cfg: &TrainConfig) -> Result<(Checkpoint, Vec<LogRow>), TrainError> {
    let mut t = Trainer::new(bundle, cfg.clone())?;
    let mut log = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let row = t.step()?;
        if row.iteration % 500 == 0 {
            info!(
                "iteration {} loss {:.5} psnr {:.2} gaussians {}",
                row.iteration, row.total, row.psnr, row.n_gaussians
            );
        }
        log.push(row);
    }
    Ok((t.checkpoint(), log))
}

pub fn write_log(rows: &[LogRow], path: &Path) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Renders a view from a checkpoint. Clean mode bypasses the medium.
pub fn render_view(ckpt: &Checkpoint, camera: &Camera, mode: RenderMode) -> (RgbImage, GrayImage) {
    let vr = pipeline::forward(&ckpt.cloud, ckpt.medium.as_ref(), camera, ckpt.cloud.sh_degree, mode);
    (vr.out.image, vr.out.depth)
}

/// Metrics per test view. `exclude` marks pixels (e.g. moving objects) to
/// leave out, indexed like `bundle.views`.
pub fn evaluate(
    ckpt: &Checkpoint,
    bundle: &SceneBundle,
    exclude: Option<&[Option<Mask>]>,
) -> Vec<(usize, Result<Metrics, MetricsError>)> {
    bundle
        .test
        .iter()
        .map(|&vi| {
            let view = &bundle.views[vi];
            let (img, _) = render_view(ckpt, &bundle.cameras[view.camera], RenderMode::Underwater);
            let valid = exclude.and_then(|e| e[vi].as_ref()).map(|m| {
                Mask::from_data(m.width, m.height, m.data.iter().map(|&b| !b).collect())
            });
            (vi, evaluate_pair(&img, &view.image, valid.as_ref()))
        })
        .collect()
}
