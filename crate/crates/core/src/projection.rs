//! EWA projection of 3D Gaussians to screen-space splats.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use thiserror::Error;

use crate::camera::Camera;
use crate::gaussian::{covariance_backward, covariance_from, normalize_quat};

/// Near plane in scene units.
pub const ZNEAR: f64 = 0.01;
/// Low-pass floor added to the 2D covariance diagonal (px²).
pub const LOW_PASS: f64 = 0.3;
/// Splat extent in standard deviations.
pub const CULL_SIGMA: f64 = 3.0;

#[derive(Debug, Error, PartialEq)]
#[error("Gaussian center coincides with the camera center (distance {0:e})")]
pub struct DegenerateDirection(pub f64);

/// A Gaussian projected into one view.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    /// Index of the source Gaussian in its cloud.
    pub index: usize,
    pub mean2d: [f64; 2],
    /// Packed symmetric covariance `(xx, xy, yy)` in px², including the floor.
    pub cov2d: [f64; 3],
    /// Distance from the camera center; used for sorting and depth blending.
    pub depth: f64,
    pub color: [f64; 3],
    pub opacity: f64,
    /// `CULL_SIGMA * sqrt(λ_max(cov2d))` in pixels.
    pub radius: f64,
}

/// Distance and unit direction from the camera center to `position`.
pub fn depth_and_dir(
    position: &Vector3<f64>,
    camera: &Camera,
) -> Result<(f64, [f64; 3]), DegenerateDirection> {
    let v = position - camera.center();
    let z = v.norm();
    if z < 1e-9 {
        return Err(DegenerateDirection(z));
    }
    Ok((z, [v.x / z, v.y / z, v.z / z]))
}

/// Projects a Gaussian center and covariance; returns `None` when culled.
pub fn project(
    index: usize,
    position: &Vector3<f64>,
    covariance: &Matrix3<f64>,
    opacity: f64,
    camera: &Camera,
) -> Option<Splat2D> {
    let w = camera.rotation_matrix();
    let t = w * position + camera.translation;
    if t.z <= ZNEAR {
        return None;
    }
    let jac = projection_jacobian(&t, camera);
    let tm = jac * w;
    let cov = tm * covariance * tm.transpose();
    let cov2d = [cov[(0, 0)] + LOW_PASS, 0.5 * (cov[(0, 1)] + cov[(1, 0)]), cov[(1, 1)] + LOW_PASS];
    let mean2d = [camera.fx * t.x / t.z + camera.cx, camera.fy * t.y / t.z + camera.cy];
    let radius = CULL_SIGMA * max_eigenvalue(cov2d).sqrt();
    if !radius.is_finite()
        || mean2d[0] + radius < 0.0
        || mean2d[0] - radius > camera.width as f64
        || mean2d[1] + radius < 0.0
        || mean2d[1] - radius > camera.height as f64
    {
        return None;
    }
    let depth = (position - camera.center()).norm();
    Some(Splat2D { index, mean2d, cov2d, depth, color: [0.0; 3], opacity, radius })
}

pub fn max_eigenvalue(c: [f64; 3]) -> f64 {
    let mid = 0.5 * (c[0] + c[2]);
    let det = c[0] * c[2] - c[1] * c[1];
    mid + (mid * mid - det).max(0.0).sqrt()
}

fn projection_jacobian(t: &Vector3<f64>, cam: &Camera) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * t.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * t.y * iz * iz,
    )
}

/// Upstream gradients arriving at one projected Gaussian.
#[derive(Debug, Clone, Copy, Default)]
pub struct SplatUpstream {
    pub d_mean2d: [f64; 2],
    /// Packed `(xx, xy, yy)`; `xy` is the derivative w.r.t. the single
    /// off-diagonal parameter.
    pub d_cov2d: [f64; 3],
    /// Derivative w.r.t. the camera distance.
    pub d_depth: f64,
    /// Derivative w.r.t. the unit view direction.
    pub d_dir: [f64; 3],
}

/// Gradients on one Gaussian's geometric parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GeometryGrads {
    pub d_position: [f64; 3],
    pub d_rotation: [f64; 4],
    pub d_log_scale: [f64; 3],
}

/// Backward of [`project`] plus [`depth_and_dir`] for one Gaussian.
pub fn project_backward(
    position: &Vector3<f64>,
    raw_rotation: [f64; 4],
    log_scale: [f64; 3],
    camera: &Camera,
    up: &SplatUpstream,
) -> GeometryGrads {
    let w = camera.rotation_matrix();
    let t = w * position + camera.translation;
    let jac = projection_jacobian(&t, camera);
    let tm = jac * w;
    let sigma = covariance_from(normalize_quat(raw_rotation), log_scale.map(f64::exp));

    let g = Matrix2::new(up.d_cov2d[0], 0.5 * up.d_cov2d[1], 0.5 * up.d_cov2d[1], up.d_cov2d[2]);
    // cov2d = T Σ Tᵀ with T = J W
    let d_sigma = tm.transpose() * g * tm;
    let d_tm = 2.0 * g * tm * sigma;
    let d_jac = d_tm * w.transpose();

    let (fx, fy) = (camera.fx, camera.fy);
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut d_t = Vector3::zeros();
    // mean2d
    d_t.x += up.d_mean2d[0] * fx * iz;
    d_t.y += up.d_mean2d[1] * fy * iz;
    d_t.z += -up.d_mean2d[0] * fx * t.x * iz2 - up.d_mean2d[1] * fy * t.y * iz2;
    // Jacobian entries
    d_t.z += d_jac[(0, 0)] * (-fx * iz2);
    d_t.x += d_jac[(0, 2)] * (-fx * iz2);
    d_t.z += d_jac[(0, 2)] * (2.0 * fx * t.x * iz3);
    d_t.z += d_jac[(1, 1)] * (-fy * iz2);
    d_t.y += d_jac[(1, 2)] * (-fy * iz2);
    d_t.z += d_jac[(1, 2)] * (2.0 * fy * t.y * iz3);

    let mut d_pos = w.transpose() * d_t;

    let v = position - camera.center();
    let dist = v.norm();
    if dist > 1e-12 {
        let theta = v / dist;
        let d_dir = Vector3::from(up.d_dir);
        d_pos += theta * up.d_depth + (d_dir - theta * theta.dot(&d_dir)) / dist;
    }

    let (d_rotation, d_log_scale) = covariance_backward(raw_rotation, log_scale, &d_sigma);
    GeometryGrads { d_position: [d_pos.x, d_pos.y, d_pos.z], d_rotation, d_log_scale }
}
