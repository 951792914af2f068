//! Feed-forward network with layer normalization and GELU hidden units.
//!
//! Hidden layers compute `gelu(ln(W x + b) * gain + offset)`; the output layer
//! is a plain affine map. GELU uses the exact Gaussian-CDF form so gradients
//! can be checked against finite differences without an approximation gap.
//! All math is in `f64`.

use rand::Rng;

use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-6;
const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2))
}

#[inline]
fn norm_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Exact GELU: `x * Phi(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    x * norm_cdf(x)
}

/// Derivative of exact GELU: `Phi(x) + x * phi(x)`.
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    norm_cdf(x) + x * norm_pdf(x)
}

/// Whether a layer applies layer norm + GELU or is a plain affine output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// `gelu(ln(Wx + b) * gain + offset)`
    Hidden,
    /// `Wx + b`
    Output,
}

/// One dense layer. Weights are row-major with shape `(out_dim, in_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub kind: LayerKind,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    /// Layer-norm gain; empty for output layers.
    pub ln_gain: Vec<f64>,
    /// Layer-norm offset; empty for output layers.
    pub ln_offset: Vec<f64>,
}

impl Layer {
    fn new(in_dim: usize, out_dim: usize, kind: LayerKind) -> Self {
        let (ln_gain, ln_offset) = match kind {
            LayerKind::Hidden => (vec![1.0; out_dim], vec![0.0; out_dim]),
            LayerKind::Output => (Vec::new(), Vec::new()),
        };
        Layer {
            in_dim,
            out_dim,
            kind,
            w: vec![0.0; in_dim * out_dim],
            b: vec![0.0; out_dim],
            ln_gain,
            ln_offset,
        }
    }
}

/// MLP parameters. The architecture is fixed at construction; only the
/// values change afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
}

/// Per-layer forward intermediates kept for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct Cache {
    /// Input to each layer (first entry is the network input).
    inputs: Vec<Vec<f64>>,
    /// Pre-normalization affine outputs per layer.
    pre: Vec<Vec<f64>>,
    /// Post-LN, pre-activation values per hidden layer (empty for output).
    normed: Vec<Vec<f64>>,
    /// (mean, inv_std) of the LN per hidden layer.
    ln_stats: Vec<(f64, f64)>,
    output: Vec<f64>,
}

impl Cache {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

/// Gradients with the same shapes as [`Mlp`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub ln_gain: Vec<f64>,
    pub ln_offset: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Gradients {
            layers: mlp
                .layers
                .iter()
                .map(|l| LayerGrads {
                    w: vec![0.0; l.w.len()],
                    b: vec![0.0; l.b.len()],
                    ln_gain: vec![0.0; l.ln_gain.len()],
                    ln_offset: vec![0.0; l.ln_offset.len()],
                })
                .collect(),
        }
    }

    pub fn reset(&mut self) {
        for l in &mut self.layers {
            l.w.fill(0.0);
            l.b.fill(0.0);
            l.ln_gain.fill(0.0);
            l.ln_offset.fill(0.0);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            for v in l
                .w
                .iter_mut()
                .chain(l.b.iter_mut())
                .chain(l.ln_gain.iter_mut())
                .chain(l.ln_offset.iter_mut())
            {
                *v *= s;
            }
        }
    }

    /// Global L2 norm over every entry.
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0;
        for l in &self.layers {
            for v in l.w.iter().chain(&l.b).chain(&l.ln_gain).chain(&l.ln_offset) {
                acc += v * v;
            }
        }
        acc.sqrt()
    }

    /// Scales gradients so the global norm does not exceed `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
    }

    pub fn for_each(&self, mut f: impl FnMut(f64)) {
        for l in &self.layers {
            for &v in l.w.iter().chain(&l.b).chain(&l.ln_gain).chain(&l.ln_offset) {
                f(v);
            }
        }
    }
}

impl Mlp {
    /// Builds an MLP with the given hidden sizes. Hidden layers get layer
    /// norm + GELU, the output layer is affine. Hidden weights use fan-in
    /// scaled uniform init; the output layer starts at zero so an untrained
    /// scalar head reads 0 and an untrained softmax head is uniform.
    pub fn new<R: Rng + ?Sized>(
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 || hidden.iter().any(|&h| h == 0) {
            return Err(Error::config("mlp dims must all be > 0"));
        }
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = in_dim;
        for &h in hidden {
            let mut layer = Layer::new(prev, h, LayerKind::Hidden);
            let limit = (3.0 / prev as f64).sqrt();
            for w in &mut layer.w {
                *w = rng.random_range(-limit..limit);
            }
            layers.push(layer);
            prev = h;
        }
        layers.push(Layer::new(prev, out_dim, LayerKind::Output));
        Ok(Mlp { layers })
    }

    /// Builds from explicit layers; used by checkpoint loading.
    pub(crate) fn from_layers(layers: Vec<Layer>) -> Self {
        Mlp { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn same_architecture(&self, other: &Mlp) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.in_dim == b.in_dim && a.out_dim == b.out_dim && a.kind == b.kind)
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.len() + l.b.len() + l.ln_gain.len() + l.ln_offset.len())
            .sum()
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.in_dim() {
            return Err(Error::Shape {
                context: "mlp input",
                expected: self.in_dim(),
                got: input.len(),
            });
        }
        Ok(())
    }

    /// Forward pass, allocating the output.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        let mut z = Vec::new();
        for layer in &self.layers {
            z.clear();
            z.resize(layer.out_dim, 0.0);
            affine(layer, &x, &mut z);
            match layer.kind {
                LayerKind::Hidden => {
                    let (mean, inv_std) = ln_stats(&z);
                    x.clear();
                    x.extend(z.iter().enumerate().map(|(i, &v)| {
                        let normed = (v - mean) * inv_std * layer.ln_gain[i] + layer.ln_offset[i];
                        gelu(normed)
                    }));
                }
                LayerKind::Output => {
                    x.clear();
                    x.extend_from_slice(&z);
                }
            }
        }
        Ok(x)
    }

    /// Forward pass that records intermediates for [`Mlp::backward`].
    pub fn forward_cached(&self, input: &[f64], cache: &mut Cache) -> Result<()> {
        self.check_input(input)?;
        cache.inputs.clear();
        cache.pre.clear();
        cache.normed.clear();
        cache.ln_stats.clear();

        let mut x = input.to_vec();
        for layer in &self.layers {
            cache.inputs.push(x.clone());
            let mut z = vec![0.0; layer.out_dim];
            affine(layer, &x, &mut z);
            match layer.kind {
                LayerKind::Hidden => {
                    let (mean, inv_std) = ln_stats(&z);
                    let mut normed = vec![0.0; layer.out_dim];
                    x.clear();
                    for i in 0..layer.out_dim {
                        let n = (z[i] - mean) * inv_std * layer.ln_gain[i] + layer.ln_offset[i];
                        normed[i] = n;
                        x.push(gelu(n));
                    }
                    cache.ln_stats.push((mean, inv_std));
                    cache.normed.push(normed);
                }
                LayerKind::Output => {
                    x.clear();
                    x.extend_from_slice(&z);
                    cache.ln_stats.push((0.0, 0.0));
                    cache.normed.push(Vec::new());
                }
            }
            cache.pre.push(z);
        }
        cache.output = x;
        Ok(())
    }

    /// Reverse-mode pass. Accumulates parameter gradients into `grads`
    /// (callers zero or reuse across a batch) and returns the gradient with
    /// respect to the network input.
    pub fn backward(&self, cache: &Cache, output_grad: &[f64], grads: &mut Gradients) -> Vec<f64> {
        assert_eq!(output_grad.len(), self.out_dim(), "output_grad length");
        assert_eq!(grads.layers.len(), self.layers.len(), "grads arity");

        let mut upstream = output_grad.to_vec();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[idx];
            let g = &mut grads.layers[idx];

            // Gradient w.r.t. the affine pre-activation z.
            let dz: Vec<f64> = match layer.kind {
                LayerKind::Output => upstream.clone(),
                LayerKind::Hidden => {
                    let normed = &cache.normed[idx];
                    let (mean, inv_std) = cache.ln_stats[idx];
                    let z = &cache.pre[idx];
                    let n = layer.out_dim as f64;

                    // Through GELU, then the LN affine (gain/offset).
                    let mut d_xhat = vec![0.0; layer.out_dim];
                    for i in 0..layer.out_dim {
                        let dn = upstream[i] * gelu_grad(normed[i]);
                        let xhat = (z[i] - mean) * inv_std;
                        g.ln_gain[i] += dn * xhat;
                        g.ln_offset[i] += dn;
                        d_xhat[i] = dn * layer.ln_gain[i];
                    }
                    // Through the normalization itself.
                    let mean_dxhat = d_xhat.iter().sum::<f64>() / n;
                    let mean_dxhat_xhat = d_xhat
                        .iter()
                        .zip(z)
                        .map(|(&d, &zi)| d * (zi - mean) * inv_std)
                        .sum::<f64>()
                        / n;
                    (0..layer.out_dim)
                        .map(|i| {
                            let xhat = (z[i] - mean) * inv_std;
                            inv_std * (d_xhat[i] - mean_dxhat - xhat * mean_dxhat_xhat)
                        })
                        .collect()
                }
            };

            let mut d_input = vec![0.0; layer.in_dim];
            for o in 0..layer.out_dim {
                let d = dz[o];
                g.b[o] += d;
                let row = o * layer.in_dim;
                for i in 0..layer.in_dim {
                    g.w[row + i] += d * input[i];
                    d_input[i] += layer.w[row + i] * d;
                }
            }
            upstream = d_input;
        }
        upstream
    }

    /// Elementwise Polyak update: `self = (1 - beta) * self + beta * online`.
    pub fn polyak_update(&mut self, online: &Mlp, beta: f64) -> Result<()> {
        if !self.same_architecture(online) {
            return Err(Error::config("polyak update requires identical architectures"));
        }
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            polyak_slice(&mut t.w, &o.w, beta);
            polyak_slice(&mut t.b, &o.b, beta);
            polyak_slice(&mut t.ln_gain, &o.ln_gain, beta);
            polyak_slice(&mut t.ln_offset, &o.ln_offset, beta);
        }
        Ok(())
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for l in &mut self.layers {
            for v in l
                .w
                .iter_mut()
                .chain(l.b.iter_mut())
                .chain(l.ln_gain.iter_mut())
                .chain(l.ln_offset.iter_mut())
            {
                f(v);
            }
        }
    }
}

#[inline]
fn affine(layer: &Layer, x: &[f64], out: &mut [f64]) {
    for (o, slot) in out.iter_mut().enumerate() {
        let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
        let mut acc = layer.b[o];
        for (w, xi) in row.iter().zip(x) {
            acc += w * xi;
        }
        *slot = acc;
    }
}

#[inline]
fn ln_stats(z: &[f64]) -> (f64, f64) {
    let n = z.len() as f64;
    let mean = z.iter().sum::<f64>() / n;
    let var = z.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

#[inline]
fn polyak_slice(target: &mut [f64], online: &[f64], beta: f64) {
    for (t, &o) in target.iter_mut().zip(online) {
        *t = (1.0 - beta) * *t + beta * o;
    }
}
