//! Color appearance model for scattering media.
//!
//! A small MLP maps the positionally encoded camera distance and view
//! direction of each Gaussian to its medium parameters; the Gaussian color is
//! then transformed per channel as `c_m = T_D·c + (1 − T_B)·b`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use thiserror::Error;

pub const DEFAULT_NUM_FREQS: usize = 4;
pub const DEFAULT_HIDDEN: usize = 64;
pub const NUM_HEADS: usize = 5;
/// Lower clamp on β when inverting attenuation to a distance.
pub const EPS_BETA: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum MediumError {
    #[error("medium network produced a non-finite activation")]
    NonFiniteActivation,
    #[error("parameter vector has {got} entries, layer shapes require {expected}")]
    ParameterCount { expected: usize, got: usize },
}

/// Per-Gaussian medium parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MediumParams {
    pub t_d: [f64; 3],
    pub t_b: [f64; 3],
    pub beta_d: [f64; 3],
    pub beta_b: [f64; 3],
    pub b: [f64; 3],
}

impl MediumParams {
    /// Clear water: nothing attenuated, no backscatter.
    pub const IDENTITY: MediumParams = MediumParams {
        t_d: [1.0; 3],
        t_b: [1.0; 3],
        beta_d: [0.0; 3],
        beta_b: [0.0; 3],
        b: [0.0; 3],
    };

    fn heads(&self) -> [[f64; 3]; NUM_HEADS] {
        [self.t_d, self.t_b, self.beta_d, self.beta_b, self.b]
    }

    fn from_heads(h: [[f64; 3]; NUM_HEADS]) -> Self {
        Self { t_d: h[0], t_b: h[1], beta_d: h[2], beta_b: h[3], b: h[4] }
    }

    pub fn t_d_mean(&self) -> f64 {
        (self.t_d[0] + self.t_d[1] + self.t_d[2]) / 3.0
    }
}

/// `[sin(2^k π x), cos(2^k π x)]` for `k < num_freqs`, per component.
pub fn pos_encode(x: &[f64], num_freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * num_freqs * x.len());
    for &v in x {
        for k in 0..num_freqs {
            let a = (1u64 << k) as f64 * PI * v;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}

/// Derivative of each encoded component w.r.t. the input component it came from.
fn pos_encode_deriv(x: &[f64], num_freqs: usize, out: &mut Vec<f64>) {
    out.clear();
    for &v in x {
        for k in 0..num_freqs {
            let f = (1u64 << k) as f64 * PI;
            let a = f * v;
            out.push(f * a.cos());
            out.push(-f * a.sin());
        }
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Head activation kinds in head order (T_D, T_B, β_d, β_b, b).
const HEAD_IS_SOFTPLUS: [bool; NUM_HEADS] = [false, false, true, true, false];

/// The medium MLP: two ReLU layers and five 3-wide heads.
///
/// Parameters live in one flat vector. Each dense layer occupies
/// `rows × (cols + 1)` row-major entries, the trailing entry of each row
/// being the bias; the five heads are consecutive and therefore also form a
/// single `15 × (hidden + 1)` block.
#[derive(Debug, Clone, PartialEq)]
pub struct MediumNet {
    pub num_freqs: usize,
    pub hidden: usize,
    /// Distances are divided by this before encoding.
    pub depth_scale: f64,
    params: Vec<f64>,
}

/// Saved activations of a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<(f64, [f64; 3])>,
    x: DMatrix<f64>,
    h1: DMatrix<f64>,
    h2: DMatrix<f64>,
    out: DMatrix<f64>,
}

/// Upstream gradients on one sample's medium parameters.
pub type MediumParamsGrad = MediumParams;

impl MediumNet {
    pub fn new(seed: u64, depth_scale: f64) -> Self {
        Self::with_shape(seed, depth_scale, DEFAULT_NUM_FREQS, DEFAULT_HIDDEN)
    }

    pub fn with_shape(seed: u64, depth_scale: f64, num_freqs: usize, hidden: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = Self::shapes_for(num_freqs, hidden);
        let mut params = Vec::new();
        for (rows, cols) in shapes {
            let bound = 1.0 / ((cols - 1) as f64).sqrt();
            for _ in 0..rows * cols {
                params.push(crate::to_f32_precision(rng.gen_range(-bound..bound)));
            }
        }
        Self { num_freqs, hidden, depth_scale, params }
    }

    /// A net whose output is [`MediumParams::IDENTITY`] colour-wise for every
    /// input: zero head weights with biases that saturate the sigmoids
    /// exactly (`σ(40) == 1.0`, `σ(−800) == 0.0` in f64).
    pub fn identity(depth_scale: f64) -> Self {
        let mut net = Self::new(0, depth_scale);
        let w = net.hidden + 1;
        let head_start = net.params.len() - NUM_HEADS * 3 * w;
        for (h, bias) in [40.0, 40.0, 0.0, 0.0, -800.0].into_iter().enumerate() {
            for r in 0..3 {
                let row = head_start + (h * 3 + r) * w;
                net.params[row..row + w].fill(0.0);
                net.params[row + w - 1] = bias;
            }
        }
        net
    }

    pub fn from_params(
        num_freqs: usize,
        hidden: usize,
        depth_scale: f64,
        params: Vec<f64>,
    ) -> Result<Self, MediumError> {
        let expected: usize = Self::shapes_for(num_freqs, hidden).iter().map(|(r, c)| r * c).sum();
        if params.len() != expected {
            return Err(MediumError::ParameterCount { expected, got: params.len() });
        }
        Ok(Self { num_freqs, hidden, depth_scale, params })
    }

    pub fn input_width(&self) -> usize {
        2 * self.num_freqs * 4
    }

    /// `(rows, cols)` per dense layer, where `cols` includes the bias column.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        Self::shapes_for(self.num_freqs, self.hidden)
    }

    /// Layer shapes of a net with the given encoding and hidden width.
    pub fn shapes_for(num_freqs: usize, hidden: usize) -> Vec<(usize, usize)> {
        let input = 2 * num_freqs * 4;
        let mut v = vec![(hidden, input + 1), (hidden, hidden + 1)];
        v.extend(std::iter::repeat_n((3, hidden + 1), NUM_HEADS));
        v
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Splits a `rows × (cols+1)` block starting at `offset` into weight and bias.
    fn block(&self, offset: usize, rows: usize, cols: usize) -> (DMatrix<f64>, Vec<f64>) {
        let mut w = DMatrix::zeros(rows, cols);
        let mut b = vec![0.0; rows];
        for r in 0..rows {
            let row = &self.params[offset + r * (cols + 1)..offset + (r + 1) * (cols + 1)];
            for c in 0..cols {
                w[(r, c)] = row[c];
            }
            b[r] = row[cols];
        }
        (w, b)
    }

    fn offsets(&self) -> [usize; 3] {
        let input = self.input_width();
        let o1 = 0;
        let o2 = o1 + self.hidden * (input + 1);
        let o3 = o2 + self.hidden * (self.hidden + 1);
        [o1, o2, o3]
    }

    /// Encoded input row for one sample.
    pub fn encode(&self, z: f64, dir: [f64; 3]) -> Vec<f64> {
        let mut e = pos_encode(&[z / self.depth_scale], self.num_freqs);
        e.extend(pos_encode(&dir, self.num_freqs));
        e
    }

    pub fn forward(&self, z: f64, dir: [f64; 3]) -> Result<MediumParams, MediumError> {
        let (mut p, _) = self.forward_batch(&[(z, dir)])?;
        Ok(p.pop().expect("one sample"))
    }

    /// Evaluates the net on a batch of `(distance, unit direction)` samples.
    pub fn forward_batch(
        &self,
        inputs: &[(f64, [f64; 3])],
    ) -> Result<(Vec<MediumParams>, ForwardCache), MediumError> {
        let n = inputs.len();
        let iw = self.input_width();
        let hd = self.hidden;
        let [o1, o2, o3] = self.offsets();
        let (w1, b1) = self.block(o1, hd, iw);
        let (w2, b2) = self.block(o2, hd, hd);
        let (wh, bh) = self.block(o3, 3 * NUM_HEADS, hd);

        let mut x = DMatrix::zeros(n, iw);
        for (i, &(z, dir)) in inputs.iter().enumerate() {
            for (j, v) in self.encode(z, dir).into_iter().enumerate() {
                x[(i, j)] = v;
            }
        }
        let mut h1 = &x * w1.transpose();
        add_bias_relu(&mut h1, &b1, true);
        let mut h2 = &h1 * w2.transpose();
        add_bias_relu(&mut h2, &b2, true);
        let mut out = &h2 * wh.transpose();
        add_bias_relu(&mut out, &bh, false);

        let mut params = Vec::with_capacity(n);
        for i in 0..n {
            let mut heads = [[0.0; 3]; NUM_HEADS];
            for (h, head) in heads.iter_mut().enumerate() {
                for c in 0..3 {
                    let v = out[(i, 3 * h + c)];
                    head[c] = if HEAD_IS_SOFTPLUS[h] { softplus(v) } else { sigmoid(v) };
                    if !head[c].is_finite() {
                        return Err(MediumError::NonFiniteActivation);
                    }
                }
            }
            params.push(MediumParams::from_heads(heads));
        }
        Ok((params, ForwardCache { inputs: inputs.to_vec(), x, h1, h2, out }))
    }

    /// Reverse-mode pass. Returns weight gradients (same layout as
    /// [`MediumNet::params`]) and, per sample, the gradient w.r.t. the raw
    /// distance and the unit direction.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &[MediumParamsGrad],
    ) -> (Vec<f64>, Vec<(f64, [f64; 3])>) {
        let n = cache.inputs.len();
        assert_eq!(upstream.len(), n);
        let iw = self.input_width();
        let hd = self.hidden;
        let [o1, o2, o3] = self.offsets();
        let (w1, _) = self.block(o1, hd, iw);
        let (w2, _) = self.block(o2, hd, hd);
        let (wh, _) = self.block(o3, 3 * NUM_HEADS, hd);

        let mut d_out = DMatrix::zeros(n, 3 * NUM_HEADS);
        for i in 0..n {
            let up = upstream[i].heads();
            for h in 0..NUM_HEADS {
                for c in 0..3 {
                    let pre = cache.out[(i, 3 * h + c)];
                    let s = sigmoid(pre);
                    // softplus' = sigmoid; sigmoid' = s(1-s)
                    let deriv = if HEAD_IS_SOFTPLUS[h] { s } else { s * (1.0 - s) };
                    d_out[(i, 3 * h + c)] = up[h][c] * deriv;
                }
            }
        }
        let mut grads = vec![0.0; self.params.len()];
        write_block_grad(&mut grads, o3, &d_out, &cache.h2);
        let mut d_h2 = &d_out * &wh;
        relu_mask(&mut d_h2, &cache.h2);
        write_block_grad(&mut grads, o2, &d_h2, &cache.h1);
        let mut d_h1 = &d_h2 * &w2;
        relu_mask(&mut d_h1, &cache.h1);
        write_block_grad(&mut grads, o1, &d_h1, &cache.x);
        let d_x = &d_h1 * &w1;

        let nf = self.num_freqs;
        let mut deriv = Vec::new();
        let input_grads = cache
            .inputs
            .iter()
            .enumerate()
            .map(|(i, &(z, dir))| {
                pos_encode_deriv(&[z / self.depth_scale, dir[0], dir[1], dir[2]], nf, &mut deriv);
                let mut acc = [0.0; 4];
                for (j, dv) in deriv.iter().enumerate() {
                    acc[j / (2 * nf)] += d_x[(i, j)] * dv;
                }
                (acc[0] / self.depth_scale, [acc[1], acc[2], acc[3]])
            })
            .collect();
        (grads, input_grads)
    }

    pub fn quantize(&mut self) {
        self.params.iter_mut().for_each(|v| *v = crate::to_f32_precision(*v));
    }
}

fn add_bias_relu(m: &mut DMatrix<f64>, bias: &[f64], relu: bool) {
    for c in 0..m.ncols() {
        for r in 0..m.nrows() {
            let v = m[(r, c)] + bias[c];
            m[(r, c)] = if relu { v.max(0.0) } else { v };
        }
    }
}

fn relu_mask(d: &mut DMatrix<f64>, activated: &DMatrix<f64>) {
    for (g, a) in d.iter_mut().zip(activated.iter()) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Writes `dW = dZᵀ X` and `db = Σ dZ` into the packed block at `offset`.
fn write_block_grad(grads: &mut [f64], offset: usize, d_z: &DMatrix<f64>, x: &DMatrix<f64>) {
    let rows = d_z.ncols();
    let cols = x.ncols();
    let dw = d_z.transpose() * x;
    for r in 0..rows {
        let base = offset + r * (cols + 1);
        for c in 0..cols {
            grads[base + c] = dw[(r, c)];
        }
        grads[base + cols] = d_z.column(r).sum();
    }
}

/// `c_m = T_D·c + (1 − T_B)·b`, per channel, unclamped.
pub fn transform_color(c: [f64; 3], p: &MediumParams) -> [f64; 3] {
    std::array::from_fn(|k| p.t_d[k] * c[k] + (1.0 - p.t_b[k]) * p.b[k])
}

/// Backward of [`transform_color`]: returns `dL/dc` and accumulates the
/// parameter gradients into `d_params`.
pub fn transform_color_backward(
    c: [f64; 3],
    p: &MediumParams,
    d_cm: [f64; 3],
    d_params: &mut MediumParams,
) -> [f64; 3] {
    let mut d_c = [0.0; 3];
    for k in 0..3 {
        d_c[k] = p.t_d[k] * d_cm[k];
        d_params.t_d[k] += c[k] * d_cm[k];
        d_params.t_b[k] += -p.b[k] * d_cm[k];
        d_params.b[k] += (1.0 - p.t_b[k]) * d_cm[k];
    }
    d_c
}

/// Distances implied by the attenuation and backscatter factors:
/// `[direct, backscatter][channel] = −ln(T)/max(β, ε)`.
pub fn implied_depth(p: &MediumParams) -> [[f64; 3]; 2] {
    let f = |t: f64, beta: f64| -t.ln() / beta.max(EPS_BETA);
    [
        std::array::from_fn(|k| f(p.t_d[k], p.beta_d[k])),
        std::array::from_fn(|k| f(p.t_b[k], p.beta_b[k])),
    ]
}
