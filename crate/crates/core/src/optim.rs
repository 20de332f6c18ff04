//! Adam over flat parameter slices, with row remapping for clouds that
//! change size.

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Scalars per row (per Gaussian); used by [`Adam::remap`].
    width: usize,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, eps: f64, width: usize, len: usize) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps, width, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }

    /// Rebuilds moment buffers for a new row layout: row `r` takes the state
    /// of `origins[r]` or starts from zero.
    pub fn remap(&mut self, origins: &[Option<usize>]) {
        let w = self.width;
        let mut m = vec![0.0; origins.len() * w];
        let mut v = vec![0.0; origins.len() * w];
        for (r, o) in origins.iter().enumerate() {
            if let Some(o) = *o {
                m[r * w..(r + 1) * w].copy_from_slice(&self.m[o * w..(o + 1) * w]);
                v[r * w..(r + 1) * w].copy_from_slice(&self.v[o * w..(o + 1) * w]);
            }
        }
        self.m = m;
        self.v = v;
    }

    /// Zeroes the moments of selected rows.
    pub fn reset_rows(&mut self, rows: &[usize]) {
        let w = self.width;
        for &r in rows {
            self.m[r * w..(r + 1) * w].iter_mut().for_each(|x| *x = 0.0);
            self.v[r * w..(r + 1) * w].iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// Exponential interpolation from `lr_init` to `lr_final` over `max_steps`.
pub fn exp_decay(lr_init: f64, lr_final: f64, step: usize, max_steps: usize) -> f64 {
    if max_steps == 0 {
        return lr_init;
    }
    let t = (step as f64 / max_steps as f64).clamp(0.0, 1.0);
    (lr_init.ln() * (1.0 - t) + lr_final.ln() * t).exp()
}
