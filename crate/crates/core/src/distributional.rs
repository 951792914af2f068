//! Value-support construction and the categorical (HL-Gaussian style) value
//! head machinery: uniform bin grids, universal/data-centric support ranges,
//! truncated-normal target projection, and categorical expectation readout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::norm_cdf;

/// Minimum support width in return units; degenerate ranges are widened to
/// this about their center so bin construction stays well defined.
pub const MIN_SUPPORT_WIDTH: f64 = 1.0;

/// Default padding fraction for the data-centric support range.
pub const DEFAULT_SUPPORT_PAD: f64 = 0.2;

/// Fixed uniform support `[v_min, v_max]` split into `m` bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportGrid {
    v_min: f64,
    v_max: f64,
    m: usize,
}

impl SupportGrid {
    /// Uniform grid over `[v_min, v_max]` with `m >= 2` bins.
    pub fn new(v_min: f64, v_max: f64, m: usize) -> Result<Self> {
        if !(v_min < v_max) || !v_min.is_finite() || !v_max.is_finite() {
            return Err(Error::config(format!(
                "degenerate support range [{v_min}, {v_max}]"
            )));
        }
        if m < 2 {
            return Err(Error::config("support needs at least 2 bins"));
        }
        Ok(SupportGrid { v_min, v_max, m })
    }

    pub fn v_min(&self) -> f64 {
        self.v_min
    }

    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    pub fn num_bins(&self) -> usize {
        self.m
    }

    /// Uniform bin width.
    pub fn bin_width(&self) -> f64 {
        (self.v_max - self.v_min) / self.m as f64
    }

    /// Edge `i` for `i` in `0..=m`.
    pub fn edge(&self, i: usize) -> f64 {
        debug_assert!(i <= self.m);
        if i == self.m {
            // Avoids drift on the last edge.
            self.v_max
        } else {
            self.v_min + self.bin_width() * i as f64
        }
    }

    /// Center of bin `i`.
    pub fn center(&self, i: usize) -> f64 {
        debug_assert!(i < self.m);
        self.v_min + self.bin_width() * (i as f64 + 0.5)
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.m).map(|i| self.center(i)).collect()
    }

    /// Index of the bin containing `v`, clamped to the support.
    pub fn bin_of(&self, v: f64) -> usize {
        let rel = (v - self.v_min) / self.bin_width();
        (rel.floor() as i64).clamp(0, self.m as i64 - 1) as usize
    }
}

/// Probability vector over the bins of a [`SupportGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDist {
    probs: Vec<f64>,
}

impl CategoricalDist {
    /// Wraps probabilities, checking non-negativity and normalization.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::config("empty probability vector"));
        }
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "invalid categorical distribution (sum {sum})"
            )));
        }
        Ok(CategoricalDist { probs })
    }

    /// Softmax of raw logits.
    pub fn from_logits(logits: &[f64]) -> Self {
        CategoricalDist {
            probs: softmax(logits),
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Expectation over the grid centers.
    pub fn mean(&self, grid: &SupportGrid) -> Result<f64> {
        dist_mean(&self.probs, grid)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Log-softmax sharing the same stabilization as [`softmax`].
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits
        .iter()
        .map(|&l| (l - max).exp())
        .sum::<f64>()
        .ln();
    logits.iter().map(|&l| l - max - log_sum).collect()
}

/// `sum_i p_i * z_i` over bin centers.
pub fn dist_mean(probs: &[f64], grid: &SupportGrid) -> Result<f64> {
    if probs.len() != grid.num_bins() {
        return Err(Error::Shape {
            context: "dist_mean",
            expected: grid.num_bins(),
            got: probs.len(),
        });
    }
    Ok(probs
        .iter()
        .enumerate()
        .map(|(i, &p)| p * grid.center(i))
        .sum())
}

/// Theoretical return bounds for an option-level process: rewards in
/// `[r_min, r_max]`, episode horizon `L`, option length `H`, intra-option
/// discount `gamma1` and inter-option discount `gamma2`. The bound is the
/// closed form of `r * sum_{k<H} gamma1^k * sum_{j<K} (gamma2^H)^j` with
/// `K = ceil(L / H)` options. A zero-reward range yields `(0, 0)`; widening
/// to a usable grid is the caller's job (see [`widen_to_floor`]).
pub fn universal_support(
    r_min: f64,
    r_max: f64,
    h: usize,
    l: usize,
    gamma1: f64,
    gamma2: f64,
) -> Result<(f64, f64)> {
    if h < 1 || l < h {
        return Err(Error::config(format!(
            "universal support needs 1 <= H <= L (got H={h}, L={l})"
        )));
    }
    if !(0.0 < gamma1 && gamma1 < 1.0 && 0.0 < gamma2 && gamma2 < 1.0) {
        return Err(Error::config("discount factors must lie in (0, 1)"));
    }
    if r_min > r_max {
        return Err(Error::config("r_min must not exceed r_max"));
    }
    let k = l.div_ceil(h);
    let intra = geometric_sum(gamma1, h);
    let inter = geometric_sum(gamma2.powi(h as i32), k);
    let scale = intra * inter;
    Ok((r_min * scale, r_max * scale))
}

/// `sum_{i=0}^{n-1} q^i` in closed form.
fn geometric_sum(q: f64, n: usize) -> f64 {
    if (q - 1.0).abs() < 1e-12 {
        n as f64
    } else {
        (1.0 - q.powi(n as i32)) / (1.0 - q)
    }
}

/// Support range from observed returns: the 1%/99% quantiles, symmetrically
/// widened by `pad` about their center, then floored at
/// [`MIN_SUPPORT_WIDTH`].
pub fn data_centric_support(returns: &[f64], pad: f64) -> Result<(f64, f64)> {
    if returns.is_empty() {
        return Err(Error::config("data-centric support needs a non-empty return sample"));
    }
    let mut sorted = returns.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite return"));
    let q01 = quantile_sorted(&sorted, 0.01);
    let q99 = quantile_sorted(&sorted, 0.99);
    let center = 0.5 * (q01 + q99);
    let half = 0.5 * (q99 - q01) * (1.0 + pad);
    Ok(widen_to_floor(center - half, center + half))
}

/// Linear-interpolation quantile on an ascending sample.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Expands `[v_min, v_max]` about its center until it is at least
/// [`MIN_SUPPORT_WIDTH`] wide.
pub fn widen_to_floor(v_min: f64, v_max: f64) -> (f64, f64) {
    let width = v_max - v_min;
    if width >= MIN_SUPPORT_WIDTH {
        (v_min, v_max)
    } else {
        let center = 0.5 * (v_min + v_max);
        (
            center - 0.5 * MIN_SUPPORT_WIDTH,
            center + 0.5 * MIN_SUPPORT_WIDTH,
        )
    }
}

/// Projects a normal `N(mu, sigma^2)` truncated to the support onto the
/// grid's bins: `p_i` is proportional to the CDF mass falling inside bin
/// `i`, renormalized over the whole support. A mean far outside the support
/// concentrates in the nearest edge bin.
pub fn project_truncated_normal(mu: f64, sigma: f64, grid: &SupportGrid) -> CategoricalDist {
    assert!(sigma > 0.0, "sigma must be positive");
    let m = grid.num_bins();
    let mut cdf = Vec::with_capacity(m + 1);
    for i in 0..=m {
        cdf.push(norm_cdf((grid.edge(i) - mu) / sigma));
    }
    let total = cdf[m] - cdf[0];
    let mut probs = vec![0.0; m];
    if total <= 1e-300 {
        // Numerically no mass on the support: collapse to the nearest bin.
        probs[grid.bin_of(mu)] = 1.0;
    } else {
        for i in 0..m {
            probs[i] = (cdf[i + 1] - cdf[i]) / total;
        }
        // Exact renormalization to absorb rounding drift.
        let sum: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= sum;
        }
    }
    CategoricalDist { probs }
}
