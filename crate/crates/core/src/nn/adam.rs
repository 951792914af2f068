//! Adam with bias correction, shaped to mirror an [`Mlp`].

use serde::{Deserialize, Serialize};

use super::mlp::{Gradients, Mlp};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: first/second moments shaped like the parameters plus a
/// step counter. `t` is incremented before the bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Gradients,
    v: Gradients,
    pub t: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(params: &Mlp, hyper: AdamHyper) -> Self {
        assert!(hyper.eps > 0.0, "adam eps must be positive");
        AdamState {
            m: Gradients::zeros_like(params),
            v: Gradients::zeros_like(params),
            t: 0,
            hyper,
        }
    }

    /// One Adam step over every parameter tensor of `params`.
    pub fn step(&mut self, params: &mut Mlp, grads: &Gradients) {
        self.t += 1;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(self.t as i32);
        let bc2 = 1.0 - h.beta2.powi(self.t as i32);

        for ((pl, gl), (ml, vl)) in params
            .layers_mut()
            .iter_mut()
            .zip(&grads.layers)
            .zip(self.m.layers.iter_mut().zip(self.v.layers.iter_mut()))
        {
            update_slice(&mut pl.w, &gl.w, &mut ml.w, &mut vl.w, h, bc1, bc2);
            update_slice(&mut pl.b, &gl.b, &mut ml.b, &mut vl.b, h, bc1, bc2);
            update_slice(
                &mut pl.ln_gain,
                &gl.ln_gain,
                &mut ml.ln_gain,
                &mut vl.ln_gain,
                h,
                bc1,
                bc2,
            );
            update_slice(
                &mut pl.ln_offset,
                &gl.ln_offset,
                &mut ml.ln_offset,
                &mut vl.ln_offset,
                h,
                bc1,
                bc2,
            );
        }
    }
}

#[inline]
fn update_slice(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    h: AdamHyper,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..p.len() {
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
    }
}

/// Flat-vector Adam for parameters that are not MLP-shaped (e.g. a learned
/// log-std vector).
#[derive(Debug, Clone)]
pub struct AdamVec {
    m: Vec<f64>,
    v: Vec<f64>,
    pub t: u64,
    pub hyper: AdamHyper,
}

impl AdamVec {
    pub fn new(len: usize, hyper: AdamHyper) -> Self {
        AdamVec {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            hyper,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "adam vec shape");
        assert_eq!(grads.len(), self.m.len(), "adam vec grads shape");
        self.t += 1;
        let bc1 = 1.0 - self.hyper.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.hyper.beta2.powi(self.t as i32);
        update_slice(params, grads, &mut self.m, &mut self.v, self.hyper, bc1, bc2);
    }
}
