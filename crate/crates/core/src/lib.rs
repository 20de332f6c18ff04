//! Differentiable 3D Gaussian splatting for scattering media.
//!
//! The crate renders and optimizes a cloud of anisotropic 3D Gaussians whose
//! colors pass through a learned per-Gaussian medium model (attenuation and
//! backscatter), with physics-compensated densification, a binary motion mask
//! for transient distractors, and a depth-aware loss stack. Everything runs on
//! the CPU; the rasterizer is tile-parallel via rayon.
//!
//! Module map:
//!
//! - [`scene_io`]: COLMAP text scenes, depth maps, PLY + MLP-sidecar checkpoints
//! - [`gaussian`], [`sh`], [`projection`]: the learnable cloud and its projection
//! - [`medium`]: positional encoding, medium MLP, affine color transform
//! - [`pipeline`]: per-view forward/backward through projection, SH, medium, raster
//! - [`raster`]: tile-based forward/backward rendering of color and depth
//! - [`density`]: compensated gradient statistics, clone/split/prune
//! - [`bmm`]: residual-driven inlier masks
//! - [`losses`]: reconstruction, depth, channel alignment, gray-world
//! - [`synth`]: ground-truthed synthetic underwater scenes
//! - [`train`]: the optimization loop, rendering and evaluation

pub mod bmm;
pub mod camera;
pub mod density;
pub mod gaussian;
pub mod image;
pub mod losses;
pub mod medium;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod projection;
pub mod raster;
pub mod scene_io;
pub mod sh;
pub mod synth;
pub mod train;

pub use camera::Camera;
pub use gaussian::GaussianCloud;
pub use image::{GrayImage, Mask, RgbImage};
pub use medium::{MediumNet, MediumParams};
pub use scene_io::SceneBundle;

/// Rounds a value to the nearest `f32`. Parameters are stored at 32-bit
/// precision while all arithmetic runs in `f64`.
#[inline]
pub fn to_f32_precision(v: f64) -> f64 {
    v as f32 as f64
}
