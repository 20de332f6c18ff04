//! Tile-based alpha blending of screen-space Gaussians.
//!
//! Color and depth are blended with identical weights:
//! `C = Σ α_i c_i Π_{j<i}(1 − α_j) + T_final·bg` and `D = Σ α_i z_i Π_{j<i}(1 − α_j)`.
//! Tiles are processed in parallel; every per-splat reduction is merged in
//! tile order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::image::{GrayImage, RgbImage};
use crate::projection::Splat2D;

pub const TILE_SIZE: usize = 16;
pub const MAX_ALPHA: f64 = 0.99;
/// Blending stops once transmittance falls below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// A splat covers a pixel when its blend weight exceeds this.
pub const COVERAGE_WEIGHT: f64 = 1e-4;
/// Contributions beyond this Mahalanobis radius are dropped, so every
/// contributing pixel lies inside the splat's tile footprint.
pub const CUTOFF_POWER: f64 = -0.5 * 9.0;

/// Screen-space quantities precomputed once per splat.
#[derive(Debug, Clone, Copy)]
pub(crate) struct PreparedSplat {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
}

impl PreparedSplat {
    fn new(s: &Splat2D) -> Self {
        let [a, b, c] = s.cov2d;
        let det = a * c - b * b;
        let inv = 1.0 / det;
        Self { mean: s.mean2d, conic: [c * inv, -b * inv, a * inv], opacity: s.opacity }
    }
}

/// Opacity of one splat at pixel center `(px, py)`. Returns
/// `(alpha, gaussian, dx, dy, clamped)` or `None` outside the cutoff.
#[inline]
pub(crate) fn splat_alpha(s: &PreparedSplat, px: f64, py: f64) -> Option<(f64, f64, f64, f64, bool)> {
    let dx = px - s.mean[0];
    let dy = py - s.mean[1];
    let power = -0.5 * (s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy);
    if power < CUTOFF_POWER || power > 0.0 {
        return None;
    }
    let g = power.exp();
    let raw = s.opacity * g;
    if raw > MAX_ALPHA {
        Some((MAX_ALPHA, g, dx, dy, true))
    } else {
        Some((raw, g, dx, dy, false))
    }
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// Final image, clamped to [0, 1].
    pub image: RgbImage,
    /// Unclamped blended color.
    pub raw_image: RgbImage,
    /// Blended depth (no background term, no renormalization).
    pub depth: GrayImage,
    pub final_transmittance: Vec<f64>,
    pub background: [f64; 3],
    /// Per splat (input order): pixels with blend weight above threshold.
    pub covered_pixels: Vec<u32>,
    /// Per splat: summed blend weights.
    pub accum_blend_weight: Vec<f64>,
    // backward state
    tiles_x: usize,
    tile_lists: Vec<Vec<u32>>,
    /// Per pixel: end (exclusive) of the processed range in its tile list.
    last_contributor: Vec<u32>,
}

impl RenderOutput {
    /// Sum of blend weights at a pixel plus its residual transmittance.
    pub fn weight_sum(&self, splats: &[Splat2D], x: usize, y: usize) -> f64 {
        let prepared: Vec<PreparedSplat> = splats.iter().map(PreparedSplat::new).collect();
        let tile = (y / TILE_SIZE) * self.tiles_x + x / TILE_SIZE;
        let end = self.last_contributor[y * self.width + x] as usize;
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let mut t = 1.0;
        let mut sum = 0.0;
        for &si in &self.tile_lists[tile][..end] {
            if let Some((a, ..)) = splat_alpha(&prepared[si as usize], px, py) {
                sum += a * t;
                t *= 1.0 - a;
            }
        }
        sum + self.final_transmittance[y * self.width + x]
    }
}

/// Gradients of a scalar loss w.r.t. each input splat (input order).
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrads {
    pub d_mean2d: Vec<[f64; 2]>,
    /// Packed `(xx, xy, yy)`.
    pub d_cov2d: Vec<[f64; 3]>,
    pub d_color: Vec<[f64; 3]>,
    pub d_opacity: Vec<f64>,
    pub d_depth: Vec<f64>,
    pub d_background: [f64; 3],
}

impl RasterGrads {
    fn zeros(n: usize) -> Self {
        Self {
            d_mean2d: vec![[0.0; 2]; n],
            d_cov2d: vec![[0.0; 3]; n],
            d_color: vec![[0.0; 3]; n],
            d_opacity: vec![0.0; n],
            d_depth: vec![0.0; n],
            d_background: [0.0; 3],
        }
    }
}

fn tile_bounds(s: &Splat2D, tiles_x: usize, tiles_y: usize) -> Option<(usize, usize, usize, usize)> {
    let ts = TILE_SIZE as f64;
    let x0 = ((s.mean2d[0] - s.radius) / ts).floor().max(0.0);
    let y0 = ((s.mean2d[1] - s.radius) / ts).floor().max(0.0);
    let x1 = ((s.mean2d[0] + s.radius) / ts).floor().min(tiles_x as f64 - 1.0);
    let y1 = ((s.mean2d[1] + s.radius) / ts).floor().min(tiles_y as f64 - 1.0);
    if x1 < x0 || y1 < y0 {
        return None;
    }
    Some((x0 as usize, y0 as usize, x1 as usize, y1 as usize))
}

fn build_tile_lists(splats: &[Splat2D], tiles_x: usize, tiles_y: usize) -> Vec<Vec<u32>> {
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for (i, s) in splats.iter().enumerate() {
        if let Some((x0, y0, x1, y1)) = tile_bounds(s, tiles_x, tiles_y) {
            for ty in y0..=y1 {
                for tx in x0..=x1 {
                    lists[ty * tiles_x + tx].push(i as u32);
                }
            }
        }
    }
    lists.par_iter_mut().for_each(|l| {
        l.sort_by(|&a, &b| {
            splats[a as usize].depth.total_cmp(&splats[b as usize].depth).then(a.cmp(&b))
        })
    });
    lists
}

struct TileForward {
    pixels: Vec<(usize, [f64; 3], f64, f64, u32)>,
    stats: Vec<(u32, u32, f64)>,
}

/// Renders color and depth for one camera of size `width × height`.
pub fn render(splats: &[Splat2D], width: usize, height: usize, background: [f64; 3]) -> RenderOutput {
    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let prepared: Vec<PreparedSplat> = splats.iter().map(PreparedSplat::new).collect();
    let tile_lists = build_tile_lists(splats, tiles_x, tiles_y);

    let results: Vec<TileForward> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tile| {
            let list = &tile_lists[tile];
            let (tx, ty) = (tile % tiles_x, tile / tiles_x);
            let mut local_cov = vec![0u32; list.len()];
            let mut local_w = vec![0.0f64; list.len()];
            let mut pixels = Vec::with_capacity(TILE_SIZE * TILE_SIZE);
            for y in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(height) {
                for x in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(width) {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut t = 1.0f64;
                    let mut color = [0.0f64; 3];
                    let mut depth = 0.0f64;
                    let mut end = 0u32;
                    for (k, &si) in list.iter().enumerate() {
                        end = k as u32 + 1;
                        let s = &splats[si as usize];
                        let Some((alpha, ..)) = splat_alpha(&prepared[si as usize], px, py) else {
                            continue;
                        };
                        let w = alpha * t;
                        for c in 0..3 {
                            color[c] += w * s.color[c];
                        }
                        depth += w * s.depth;
                        if w > COVERAGE_WEIGHT {
                            local_cov[k] += 1;
                        }
                        local_w[k] += w;
                        t *= 1.0 - alpha;
                        if t < MIN_TRANSMITTANCE {
                            break;
                        }
                    }
                    for c in 0..3 {
                        color[c] += t * background[c];
                    }
                    pixels.push((y * width + x, color, depth, t, end));
                }
            }
            let stats =
                list.iter().enumerate().map(|(k, &si)| (si, local_cov[k], local_w[k])).collect();
            TileForward { pixels, stats }
        })
        .collect();

    let mut raw_image = RgbImage::new(width, height);
    let mut depth = GrayImage::new(width, height);
    let mut final_transmittance = vec![1.0; width * height];
    let mut last_contributor = vec![0u32; width * height];
    let mut covered_pixels = vec![0u32; splats.len()];
    let mut accum_blend_weight = vec![0.0; splats.len()];
    for r in results {
        for (p, color, d, t, end) in r.pixels {
            raw_image.data[3 * p..3 * p + 3].copy_from_slice(&color);
            depth.data[p] = d;
            final_transmittance[p] = t;
            last_contributor[p] = end;
        }
        for (si, cov, w) in r.stats {
            covered_pixels[si as usize] += cov;
            accum_blend_weight[si as usize] += w;
        }
    }
    let mut image = raw_image.clone();
    image.clamp01();
    RenderOutput {
        width,
        height,
        image,
        raw_image,
        depth,
        final_transmittance,
        background,
        covered_pixels,
        accum_blend_weight,
        tiles_x,
        tile_lists,
        last_contributor,
    }
}

#[derive(Default, Clone, Copy)]
struct LocalGrad {
    mean: [f64; 2],
    conic: [f64; 3],
    color: [f64; 3],
    opacity: f64,
    depth: f64,
}

/// Exact gradients of the blending equations given upstream `dL/dImage`
/// (interleaved RGB, w.r.t. the clamped image) and `dL/dDepth`.
pub fn raster_backward(
    splats: &[Splat2D],
    out: &RenderOutput,
    d_image: &[f64],
    d_depth: Option<&[f64]>,
) -> RasterGrads {
    let (width, height) = (out.width, out.height);
    assert_eq!(d_image.len(), width * height * 3);
    if let Some(d) = d_depth {
        assert_eq!(d.len(), width * height);
    }
    let tiles_x = out.tiles_x;
    let tiles_y = height.div_ceil(TILE_SIZE);
    let prepared: Vec<PreparedSplat> = splats.iter().map(PreparedSplat::new).collect();
    let bg = out.background;

    let tile_results: Vec<(Vec<LocalGrad>, [f64; 3])> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tile| {
            let list = &out.tile_lists[tile];
            let mut local = vec![LocalGrad::default(); list.len()];
            let mut d_bg = [0.0; 3];
            let (tx, ty) = (tile % tiles_x, tile / tiles_x);
            for y in ty * TILE_SIZE..((ty + 1) * TILE_SIZE).min(height) {
                for x in tx * TILE_SIZE..((tx + 1) * TILE_SIZE).min(width) {
                    let p = y * width + x;
                    let mut gc = [0.0; 3];
                    for c in 0..3 {
                        let raw = out.raw_image.data[3 * p + c];
                        if (0.0..=1.0).contains(&raw) {
                            gc[c] = d_image[3 * p + c];
                        }
                    }
                    let gd = d_depth.map_or(0.0, |d| d[p]);
                    if gc == [0.0; 3] && gd == 0.0 {
                        continue;
                    }
                    let t_final = out.final_transmittance[p];
                    for c in 0..3 {
                        d_bg[c] += t_final * gc[c];
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let end = out.last_contributor[p] as usize;
                    let mut t = t_final;
                    let mut acc_c = bg;
                    let mut acc_d = 0.0;
                    for k in (0..end).rev() {
                        let si = list[k] as usize;
                        let ps = &prepared[si];
                        let Some((alpha, g, dx, dy, clamped)) = splat_alpha(ps, px, py) else {
                            continue;
                        };
                        let s = &splats[si];
                        // transmittance in front of this splat
                        t /= 1.0 - alpha;
                        let w = alpha * t;
                        let lg = &mut local[k];
                        let mut d_alpha = 0.0;
                        for c in 0..3 {
                            lg.color[c] += w * gc[c];
                            d_alpha += (s.color[c] - acc_c[c]) * gc[c];
                        }
                        lg.depth += w * gd;
                        d_alpha += (s.depth - acc_d) * gd;
                        d_alpha *= t;
                        for c in 0..3 {
                            acc_c[c] = alpha * s.color[c] + (1.0 - alpha) * acc_c[c];
                        }
                        acc_d = alpha * s.depth + (1.0 - alpha) * acc_d;
                        if clamped {
                            continue;
                        }
                        lg.opacity += d_alpha * g;
                        let d_power = d_alpha * alpha;
                        let q = ps.conic;
                        lg.mean[0] += d_power * (q[0] * dx + q[1] * dy);
                        lg.mean[1] += d_power * (q[1] * dx + q[2] * dy);
                        lg.conic[0] += -0.5 * dx * dx * d_power;
                        lg.conic[1] += -dx * dy * d_power;
                        lg.conic[2] += -0.5 * dy * dy * d_power;
                    }
                }
            }
            (local, d_bg)
        })
        .collect();

    let mut grads = RasterGrads::zeros(splats.len());
    let mut d_conic = vec![[0.0; 3]; splats.len()];
    for (tile, (local, d_bg)) in tile_results.into_iter().enumerate() {
        for c in 0..3 {
            grads.d_background[c] += d_bg[c];
        }
        for (k, lg) in local.into_iter().enumerate() {
            let si = out.tile_lists[tile][k] as usize;
            for a in 0..2 {
                grads.d_mean2d[si][a] += lg.mean[a];
            }
            for a in 0..3 {
                d_conic[si][a] += lg.conic[a];
                grads.d_color[si][a] += lg.color[a];
            }
            grads.d_opacity[si] += lg.opacity;
            grads.d_depth[si] += lg.depth;
        }
    }
    for (si, dq) in d_conic.iter().enumerate() {
        grads.d_cov2d[si] = conic_to_cov_grad(prepared[si].conic, *dq);
    }
    grads
}

/// Maps a packed conic gradient to a packed covariance gradient via
/// `dΣ = −Q dQ Q`.
fn conic_to_cov_grad(q: [f64; 3], dq: [f64; 3]) -> [f64; 3] {
    let (a, b, c) = (q[0], q[1], q[2]);
    let (ga, gb, gc) = (dq[0], 0.5 * dq[1], dq[2]);
    // (Q G Q) for symmetric 2x2
    let m00 = a * (a * ga + b * gb) + b * (a * gb + b * gc);
    let m01 = a * (b * ga + c * gb) + b * (b * gb + c * gc);
    let m11 = b * (b * ga + c * gb) + c * (b * gb + c * gc);
    [-m00, -2.0 * m01, -m11]
}

/// Per-splat `(covered_pixels, ‖dL/dmean2d‖)`.
pub fn coverage_stats(out: &RenderOutput, grads: &RasterGrads) -> Vec<(u32, f64)> {
    out.covered_pixels
        .iter()
        .zip(&grads.d_mean2d)
        .map(|(&n, g)| (n, (g[0] * g[0] + g[1] * g[1]).sqrt()))
        .collect()
}

/// Reference renderer: for every pixel, sort all splats by depth and blend.
/// Shares only the per-splat opacity function with [`render`].
pub fn render_reference(
    splats: &[Splat2D],
    width: usize,
    height: usize,
    background: [f64; 3],
) -> (RgbImage, GrayImage, Vec<u32>) {
    let prepared: Vec<PreparedSplat> = splats.iter().map(PreparedSplat::new).collect();
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| splats[a].depth.total_cmp(&splats[b].depth).then(a.cmp(&b)));
    let mut img = RgbImage::new(width, height);
    let mut depth = GrayImage::new(width, height);
    let mut covered = vec![0u32; splats.len()];
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut c = [0.0; 3];
            let mut d = 0.0;
            for &i in &order {
                if let Some((a, ..)) = splat_alpha(&prepared[i], px, py) {
                    let w = a * t;
                    for k in 0..3 {
                        c[k] += w * splats[i].color[k];
                    }
                    d += w * splats[i].depth;
                    if w > COVERAGE_WEIGHT {
                        covered[i] += 1;
                    }
                    t *= 1.0 - a;
                    if t < MIN_TRANSMITTANCE {
                        break;
                    }
                }
            }
            for k in 0..3 {
                c[k] += t * background[k];
            }
            img.set_pixel(x, y, c.map(|v| v.clamp(0.0, 1.0)));
            depth.data[y * width + x] = d;
        }
    }
    (img, depth, covered)
}
