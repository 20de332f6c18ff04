//! The learnable Gaussian cloud and its covariance parameterization.

use nalgebra::{Matrix3, Vector3};

use crate::sh;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Structure-of-arrays Gaussian cloud. Quaternions are `(w, x, y, z)`;
/// SH coefficients are stored per Gaussian as `[channel][basis]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub sh_degree: usize,
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub logit_opacities: Vec<f64>,
    pub sh_coeffs: Vec<f64>,
    /// Accumulated compensated 2D position gradient norms.
    pub grad_accum: Vec<f64>,
    /// Accumulated covered-pixel counts (or view counts without pixel weighting).
    pub coverage_accum: Vec<f64>,
    pub max_screen_radius: Vec<f64>,
}

impl GaussianCloud {
    pub fn empty(sh_degree: usize) -> Self {
        assert!(sh_degree <= sh::MAX_DEGREE);
        Self {
            sh_degree,
            positions: Vec::new(),
            rotations: Vec::new(),
            log_scales: Vec::new(),
            logit_opacities: Vec::new(),
            sh_coeffs: Vec::new(),
            grad_accum: Vec::new(),
            coverage_accum: Vec::new(),
            max_screen_radius: Vec::new(),
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Number of SH basis functions per channel.
    #[inline]
    pub fn num_basis(&self) -> usize {
        sh::num_basis(self.sh_degree)
    }

    #[inline]
    pub fn coeff_stride(&self) -> usize {
        3 * self.num_basis()
    }

    pub fn sh(&self, i: usize) -> &[f64] {
        let s = self.coeff_stride();
        &self.sh_coeffs[i * s..(i + 1) * s]
    }

    pub fn sh_mut(&mut self, i: usize) -> &mut [f64] {
        let s = self.coeff_stride();
        &mut self.sh_coeffs[i * s..(i + 1) * s]
    }

    /// Appends a Gaussian with the given base color (DC term only).
    pub fn push(
        &mut self,
        position: [f64; 3],
        rotation: [f64; 4],
        log_scale: [f64; 3],
        opacity: f64,
        rgb: [f64; 3],
    ) {
        self.positions.push(position);
        self.rotations.push(rotation);
        self.log_scales.push(log_scale);
        self.logit_opacities.push(logit(opacity.clamp(1e-6, 1.0 - 1e-6)));
        let nb = self.num_basis();
        for c in rgb {
            self.sh_coeffs.push(sh::rgb_to_dc(c));
            self.sh_coeffs.extend(std::iter::repeat_n(0.0, nb - 1));
        }
        self.grad_accum.push(0.0);
        self.coverage_accum.push(0.0);
        self.max_screen_radius.push(0.0);
    }

    #[inline]
    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.logit_opacities[i])
    }

    #[inline]
    pub fn scale(&self, i: usize) -> [f64; 3] {
        self.log_scales[i].map(f64::exp)
    }

    pub fn position(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.positions[i])
    }

    pub fn covariance(&self, i: usize) -> Matrix3<f64> {
        covariance_from(normalize_quat(self.rotations[i]), self.scale(i))
    }

    pub fn normalize_rotations(&mut self) {
        for q in &mut self.rotations {
            *q = normalize_quat(*q);
        }
    }

    pub fn reset_accumulators(&mut self) {
        self.grad_accum.iter_mut().for_each(|v| *v = 0.0);
        self.coverage_accum.iter_mut().for_each(|v| *v = 0.0);
        self.max_screen_radius.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Rounds every learnable field to 32-bit precision.
    pub fn quantize(&mut self) {
        use crate::to_f32_precision as q;
        for p in &mut self.positions {
            *p = p.map(q);
        }
        for r in &mut self.rotations {
            *r = r.map(q);
        }
        for s in &mut self.log_scales {
            *s = s.map(q);
        }
        self.logit_opacities.iter_mut().for_each(|v| *v = q(*v));
        self.sh_coeffs.iter_mut().for_each(|v| *v = q(*v));
    }

    /// Builds a new cloud whose rows are copied from `sources` (indices into
    /// `self`). Accumulators are carried along.
    pub fn gather(&self, sources: &[usize]) -> GaussianCloud {
        let stride = self.coeff_stride();
        let mut out = GaussianCloud::empty(self.sh_degree);
        for &i in sources {
            out.positions.push(self.positions[i]);
            out.rotations.push(self.rotations[i]);
            out.log_scales.push(self.log_scales[i]);
            out.logit_opacities.push(self.logit_opacities[i]);
            out.sh_coeffs.extend_from_slice(&self.sh_coeffs[i * stride..(i + 1) * stride]);
            out.grad_accum.push(self.grad_accum[i]);
            out.coverage_accum.push(self.coverage_accum[i]);
            out.max_screen_radius.push(self.max_screen_radius[i]);
        }
        out
    }

    /// Axis-aligned bounds of the Gaussian centers.
    pub fn bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let mut it = self.positions.iter().map(|p| Vector3::from(*p));
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), p| (lo.inf(&p), hi.sup(&p))))
    }
}

pub fn normalize_quat(q: [f64; 4]) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n < 1e-12 {
        [1.0, 0.0, 0.0, 0.0]
    } else {
        q.map(|v| v / n)
    }
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Partial derivatives of [`quat_to_matrix`] with respect to `w, x, y, z`
/// (treating the quaternion as already normalized).
pub fn quat_matrix_partials(q: [f64; 4]) -> [Matrix3<f64>; 4] {
    let [w, x, y, z] = q;
    let t = 2.0;
    [
        Matrix3::new(0.0, -t * z, t * y, t * z, 0.0, -t * x, -t * y, t * x, 0.0),
        Matrix3::new(0.0, t * y, t * z, t * y, -2.0 * t * x, -t * w, t * z, t * w, -2.0 * t * x),
        Matrix3::new(-2.0 * t * y, t * x, t * w, t * x, 0.0, t * z, -t * w, t * z, -2.0 * t * y),
        Matrix3::new(-2.0 * t * z, -t * w, t * x, t * w, -2.0 * t * z, t * y, t * x, t * y, 0.0),
    ]
}

/// `Σ = R S Sᵀ Rᵀ` for a unit quaternion and per-axis scales.
pub fn covariance_from(rotation: [f64; 4], scale: [f64; 3]) -> Matrix3<f64> {
    let m = quat_to_matrix(rotation) * Matrix3::from_diagonal(&Vector3::from(scale));
    m * m.transpose()
}

/// Backpropagates `dL/dΣ` (full symmetric matrix) to the raw (unnormalized)
/// quaternion and log-scales.
pub fn covariance_backward(
    raw_rotation: [f64; 4],
    log_scale: [f64; 3],
    d_cov: &Matrix3<f64>,
) -> ([f64; 4], [f64; 3]) {
    let q = normalize_quat(raw_rotation);
    let s = log_scale.map(f64::exp);
    let r = quat_to_matrix(q);
    let m = r * Matrix3::from_diagonal(&Vector3::from(s));
    // Σ = M Mᵀ  =>  dL/dM = (G + Gᵀ) M
    let g_sym = d_cov + d_cov.transpose();
    let d_m = g_sym * m;
    let mut d_log_scale = [0.0; 3];
    for k in 0..3 {
        let mut acc = 0.0;
        for i in 0..3 {
            acc += d_m[(i, k)] * r[(i, k)];
        }
        d_log_scale[k] = acc * s[k];
    }
    let d_r = d_m * Matrix3::from_diagonal(&Vector3::from(s));
    let partials = quat_matrix_partials(q);
    let mut d_qhat = [0.0; 4];
    for (k, p) in partials.iter().enumerate() {
        d_qhat[k] = d_r.component_mul(p).sum();
    }
    (normalize_backward(raw_rotation, d_qhat), d_log_scale)
}

/// Gradient through `q / |q|`.
pub fn normalize_backward(raw: [f64; 4], d_unit: [f64; 4]) -> [f64; 4] {
    let n = (raw.iter().map(|v| v * v).sum::<f64>()).sqrt().max(1e-12);
    let u = raw.map(|v| v / n);
    let dot: f64 = (0..4).map(|k| u[k] * d_unit[k]).sum();
    let mut out = [0.0; 4];
    for k in 0..4 {
        out[k] = (d_unit[k] - u[k] * dot) / n;
    }
    out
}

/// Mean distance to the `k` nearest neighbors of each point (brute force).
pub fn knn_mean_distance(points: &[[f64; 3]], k: usize) -> Vec<f64> {
    use rayon::prelude::*;
    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut best = vec![f64::INFINITY; k];
            for (j, o) in points.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d2 = (0..3).map(|a| (p[a] - o[a]).powi(2)).sum::<f64>();
                if d2 < best[k - 1] {
                    best[k - 1] = d2;
                    best.sort_by(|a, b| a.total_cmp(b));
                }
            }
            let finite: Vec<f64> = best.into_iter().filter(|v| v.is_finite()).collect();
            if finite.is_empty() {
                1.0
            } else {
                finite.iter().map(|d| d.sqrt()).sum::<f64>() / finite.len() as f64
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_quat(a: f64, b: f64, c: f64, d: f64) -> [f64; 4] {
        normalize_quat([a, b, c, d])
    }

    #[test]
    fn identity_and_axis_scaling() {
        let id = covariance_from([1.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0]);
        assert!((id - Matrix3::identity()).norm() < 1e-15);
        let d = covariance_from([1.0, 0.0, 0.0, 0.0], [2.0, 1.0, 1.0]);
        assert!((d - Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0))).norm() < 1e-15);
    }

    #[test]
    fn matches_nalgebra_rotation() {
        let q = random_quat(0.3, -0.7, 0.2, 0.5);
        let s = [0.5, 1.5, 0.1];
        let uq = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
            q[0], q[1], q[2], q[3],
        ));
        let r = uq.to_rotation_matrix().into_inner();
        let expected =
            r * Matrix3::from_diagonal(&Vector3::new(0.25, 2.25, 0.01)) * r.transpose();
        assert!((covariance_from(q, s) - expected).norm() < 1e-12);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let raw = [0.9, -0.3, 0.4, 0.2];
        let ls = [-0.2, 0.3, -1.0];
        let weights = Matrix3::new(0.3, -1.2, 0.5, 0.7, 0.1, -0.4, 0.9, 0.2, -0.6);
        let loss = |q: [f64; 4], l: [f64; 3]| {
            covariance_from(normalize_quat(q), l.map(f64::exp)).component_mul(&weights).sum()
        };
        let (dq, dl) = covariance_backward(raw, ls, &weights);
        let h = 1e-6;
        for k in 0..4 {
            let mut p = raw;
            let mut m = raw;
            p[k] += h;
            m[k] -= h;
            let fd = (loss(p, ls) - loss(m, ls)) / (2.0 * h);
            assert!((fd - dq[k]).abs() < 1e-7, "q{k}: {fd} vs {}", dq[k]);
        }
        for k in 0..3 {
            let mut p = ls;
            let mut m = ls;
            p[k] += h;
            m[k] -= h;
            let fd = (loss(raw, p) - loss(raw, m)) / (2.0 * h);
            assert!((fd - dl[k]).abs() < 1e-7, "s{k}: {fd} vs {}", dl[k]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn covariance_is_psd_with_squared_scale_eigenvalues(
            a in -1.0f64..1.0, b in -1.0f64..1.0, c in -1.0f64..1.0, d in -1.0f64..1.0,
            s0 in 0.01f64..3.0, s1 in 0.01f64..3.0, s2 in 0.01f64..3.0,
        ) {
            prop_assume!(a * a + b * b + c * c + d * d > 1e-3);
            let cov = covariance_from(random_quat(a, b, c, d), [s0, s1, s2]);
            let mut eig: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
            eig.sort_by(|x, y| x.total_cmp(y));
            prop_assert!(eig[0] >= -1e-9);
            let mut expect = vec![s0 * s0, s1 * s1, s2 * s2];
            expect.sort_by(|x, y| x.total_cmp(y));
            for (e, x) in eig.iter().zip(&expect) {
                prop_assert!((e - x).abs() < 1e-9 * (1.0 + x));
            }
        }
    }
}
