//! Per-view forward and backward through the whole model: projection,
//! SH color, per-Gaussian medium transform, and rasterization.

use rayon::prelude::*;

use crate::camera::Camera;
use crate::gaussian::{normalize_quat, sigmoid, GaussianCloud};
use crate::medium::{transform_color, transform_color_backward, ForwardCache, MediumNet, MediumParams};
use crate::projection::{project, project_backward, Splat2D, SplatUpstream};
use crate::raster::{raster_backward, render, RasterGrads, RenderOutput};
use crate::sh::{eval_sh, eval_sh_backward};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderMode {
    /// Gaussian colors pass through the medium; the background is the mean
    /// backscatter color of the visible Gaussians.
    Underwater,
    /// Untransformed Gaussian colors over a black background.
    Clean,
}

/// Everything the backward pass needs from one forward render.
#[derive(Debug, Clone)]
pub struct ViewRender {
    pub out: RenderOutput,
    /// Visible splats; `splat.index` is the Gaussian index.
    pub splats: Vec<Splat2D>,
    pub dirs: Vec<[f64; 3]>,
    /// Colors before the medium transform.
    pub base_colors: Vec<[f64; 3]>,
    /// Medium parameters per visible splat (underwater mode with a net).
    pub medium: Option<(Vec<MediumParams>, ForwardCache)>,
    pub mode: RenderMode,
    pub sh_degree: usize,
}

impl ViewRender {
    /// Mean `T_D` over RGB per visible splat (1 without a medium).
    pub fn t_d_means(&self) -> Vec<f64> {
        match &self.medium {
            Some((p, _)) => p.iter().map(MediumParams::t_d_mean).collect(),
            None => vec![1.0; self.splats.len()],
        }
    }
}

/// Renders one view. `medium` is ignored in clean mode; underwater mode
/// without a net is plain splatting over a black background.
pub fn forward(
    cloud: &GaussianCloud,
    medium: Option<&MediumNet>,
    camera: &Camera,
    sh_degree: usize,
    mode: RenderMode,
) -> ViewRender {
    let nb = cloud.num_basis();
    let center = camera.center();
    let projected: Vec<(Splat2D, [f64; 3], [f64; 3])> = (0..cloud.len())
        .into_par_iter()
        .filter_map(|i| {
            let pos = cloud.position(i);
            let mut s = project(i, &pos, &cloud.covariance(i), cloud.opacity(i), camera)?;
            let v = pos - center;
            let dir = [v.x / s.depth, v.y / s.depth, v.z / s.depth];
            let c = eval_sh(cloud.sh(i), nb, dir, sh_degree).expect("degree checked by caller");
            s.color = c;
            Some((s, dir, c))
        })
        .collect();
    let mut splats = Vec::with_capacity(projected.len());
    let mut dirs = Vec::with_capacity(projected.len());
    let mut base_colors = Vec::with_capacity(projected.len());
    for (s, d, c) in projected {
        splats.push(s);
        dirs.push(d);
        base_colors.push(c);
    }
    let mut background = [0.0; 3];
    let medium_out = match (mode, medium) {
        (RenderMode::Underwater, Some(net)) if !splats.is_empty() => {
            let inputs: Vec<(f64, [f64; 3])> =
                splats.iter().zip(&dirs).map(|(s, d)| (s.depth, *d)).collect();
            let (params, cache) = net.forward_batch(&inputs).expect("finite medium activations");
            for (s, p) in splats.iter_mut().zip(&params) {
                s.color = transform_color(s.color, p);
                for c in 0..3 {
                    background[c] += p.b[c];
                }
            }
            let n = params.len() as f64;
            background = background.map(|v| v / n);
            Some((params, cache))
        }
        _ => None,
    };
    let out = render(&splats, camera.width, camera.height, background);
    ViewRender { out, splats, dirs, base_colors, medium: medium_out, mode, sh_degree }
}

/// Accumulated gradients on the cloud's learnable fields.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudGrads {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub logit_opacities: Vec<f64>,
    pub sh_coeffs: Vec<f64>,
}

impl CloudGrads {
    pub fn zeros(cloud: &GaussianCloud) -> Self {
        let n = cloud.len();
        Self {
            positions: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            log_scales: vec![[0.0; 3]; n],
            logit_opacities: vec![0.0; n],
            sh_coeffs: vec![0.0; cloud.sh_coeffs.len()],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.positions.iter().flatten().all(|v| v.is_finite())
            && self.rotations.iter().flatten().all(|v| v.is_finite())
            && self.log_scales.iter().flatten().all(|v| v.is_finite())
            && self.logit_opacities.iter().all(|v| v.is_finite())
            && self.sh_coeffs.iter().all(|v| v.is_finite())
    }
}

/// Extra upstream gradients on each visible splat's medium parameters and
/// distance (e.g. from the channel alignment loss), in splat order.
#[derive(Debug, Clone)]
pub struct MediumUpstream<'a> {
    pub d_params: &'a [MediumParams],
    pub d_z: &'a [f64],
}

/// Backpropagates image/depth gradients of one view into `grads` (cloud) and
/// `mlp_grads` (medium weights). With `sh_only`, geometry and opacity
/// gradients are dropped. Returns the raw per-splat rasterizer gradients.
#[allow(clippy::too_many_arguments)]
pub fn backward(
    cloud: &GaussianCloud,
    medium: Option<&MediumNet>,
    camera: &Camera,
    vr: &ViewRender,
    d_image: &[f64],
    d_depth: Option<&[f64]>,
    extra: Option<MediumUpstream<'_>>,
    sh_only: bool,
    grads: &mut CloudGrads,
    mlp_grads: Option<&mut [f64]>,
) -> RasterGrads {
    let rg = raster_backward(&vr.splats, &vr.out, d_image, d_depth);
    let n = vr.splats.len();
    let nb = cloud.num_basis();

    let mut d_color = rg.d_color.clone();
    let mut d_z = rg.d_depth.clone();
    let mut d_dir = vec![[0.0; 3]; n];

    if let (Some((params, cache)), Some(net)) = (&vr.medium, medium) {
        let mut d_params = vec![MediumParams::default(); n];
        let nf = n as f64;
        for k in 0..n {
            let dc = transform_color_backward(vr.base_colors[k], &params[k], rg.d_color[k], &mut d_params[k]);
            d_color[k] = dc;
            for c in 0..3 {
                d_params[k].b[c] += rg.d_background[c] / nf;
            }
        }
        if let Some(e) = &extra {
            for k in 0..n {
                add_params(&mut d_params[k], &e.d_params[k]);
                d_z[k] += e.d_z[k];
            }
        }
        let (w_grads, input_grads) = net.backward(cache, &d_params);
        if let Some(mg) = mlp_grads {
            for (a, b) in mg.iter_mut().zip(&w_grads) {
                *a += b;
            }
        }
        for k in 0..n {
            d_z[k] += input_grads[k].0;
            for a in 0..3 {
                d_dir[k][a] += input_grads[k].1[a];
            }
        }
    }

    for k in 0..n {
        let i = vr.splats[k].index;
        let dd = eval_sh_backward(
            cloud.sh(i),
            nb,
            vr.dirs[k],
            vr.sh_degree,
            d_color[k],
            &mut grads.sh_coeffs[i * 3 * nb..(i + 1) * 3 * nb],
        );
        for a in 0..3 {
            d_dir[k][a] += dd[a];
        }
    }
    if sh_only {
        return rg;
    }

    let geo: Vec<_> = (0..n)
        .into_par_iter()
        .map(|k| {
            let i = vr.splats[k].index;
            let up = SplatUpstream {
                d_mean2d: rg.d_mean2d[k],
                d_cov2d: rg.d_cov2d[k],
                d_depth: d_z[k],
                d_dir: d_dir[k],
            };
            project_backward(&cloud.position(i), cloud.rotations[i], cloud.log_scales[i], camera, &up)
        })
        .collect();
    for k in 0..n {
        let i = vr.splats[k].index;
        let g = &geo[k];
        for a in 0..3 {
            grads.positions[i][a] += g.d_position[a];
            grads.log_scales[i][a] += g.d_log_scale[a];
        }
        for a in 0..4 {
            grads.rotations[i][a] += g.d_rotation[a];
        }
        let s = sigmoid(cloud.logit_opacities[i]);
        grads.logit_opacities[i] += rg.d_opacity[k] * s * (1.0 - s);
    }
    rg
}

fn add_params(a: &mut MediumParams, b: &MediumParams) {
    for c in 0..3 {
        a.t_d[c] += b.t_d[c];
        a.t_b[c] += b.t_b[c];
        a.beta_d[c] += b.beta_d[c];
        a.beta_b[c] += b.beta_b[c];
        a.b[c] += b.b[c];
    }
}

/// Unit rotation check used by debug assertions and tests.
pub fn rotations_are_unit(cloud: &GaussianCloud, tol: f64) -> bool {
    cloud.rotations.iter().all(|q| {
        let u = normalize_quat(*q);
        (0..4).all(|k| (u[k] - q[k]).abs() <= tol)
    })
}
