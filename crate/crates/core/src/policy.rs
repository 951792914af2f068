//! Sequence policy and policy-extraction strategies: a squashed-Gaussian
//! MLP head over H-step action chunks, behavior cloning, advantage-weighted
//! regression, BC-regularized deterministic gradient with Q-normalization,
//! and best-of-N selection against a critic.
//!
//! None of the extraction losses feed gradients into value or critic
//! parameters; critics are consulted through the read-only [`CriticView`].

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::OptionBatch;
use crate::envs::ChunkPolicy;
use crate::error::{Error, Result};
use crate::nn::{Cache, Gradients, Mlp};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const SQUASH_EPS: f64 = 1e-6;
const LN_2PI: f64 = 1.837_877_066_409_345_6;

/// AWR defaults: unit temperature, weights clipped at 100.
pub const AWR_DEFAULT_LAMBDA: f64 = 1.0;
pub const AWR_WEIGHT_MAX: f64 = 100.0;

/// Squashed-Gaussian policy over H-step action sequences: an MLP emits the
/// pre-squash mean, a state-independent clamped log-std vector supplies the
/// noise scale, and `tanh` bounds every dimension to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequencePolicy {
    pub mean_net: Mlp,
    pub log_std: Vec<f64>,
    pub h: usize,
    pub act_dim: usize,
}

impl SequencePolicy {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        h: usize,
        act_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if h == 0 || act_dim == 0 {
            return Err(Error::config("policy needs h >= 1 and act_dim >= 1"));
        }
        let out = h * act_dim;
        Ok(SequencePolicy {
            mean_net: Mlp::new(obs_dim, hidden, out, rng)?,
            log_std: vec![-1.0; out],
            h,
            act_dim,
        })
    }

    pub fn chunk_len(&self) -> usize {
        self.h * self.act_dim
    }

    /// Pre-squash mean for `obs`.
    pub fn pre_squash_mean(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.mean_net.forward(obs)
    }

    /// Deterministic squashed mean action chunk.
    pub fn mean_chunk(&self, obs: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .pre_squash_mean(obs)?
            .iter()
            .map(|&u| u.tanh())
            .collect())
    }

    /// Reparameterized sample: `tanh(mean + exp(log_std) * eps)`.
    pub fn sample(&self, obs: &[f64], rng: &mut dyn RngCore) -> Result<Vec<f64>> {
        let mean = self.pre_squash_mean(obs)?;
        let mut draw = ChaCha8Rng::seed_from_u64(rng.next_u64());
        Ok(mean
            .iter()
            .zip(&self.log_std)
            .map(|(&u, &ls)| {
                let eps: f64 = draw.sample(StandardNormal);
                (u + ls.exp() * eps).tanh()
            })
            .collect())
    }

    /// Log-density of a bounded action chunk, including the tanh-squash
    /// correction. Actions at the boundary are pulled in by `1e-6`.
    pub fn log_prob(&self, obs: &[f64], chunk: &[f64]) -> Result<f64> {
        if chunk.len() != self.chunk_len() {
            return Err(Error::Shape {
                context: "policy log_prob chunk",
                expected: self.chunk_len(),
                got: chunk.len(),
            });
        }
        let mean = self.pre_squash_mean(obs)?;
        let mut logp = 0.0;
        for i in 0..chunk.len() {
            let a = chunk[i].clamp(-1.0 + SQUASH_EPS, 1.0 - SQUASH_EPS);
            let x = atanh(a);
            let ls = self.log_std[i].clamp(LOG_STD_MIN, LOG_STD_MAX);
            let z = (x - mean[i]) / ls.exp();
            // Gaussian term plus the change-of-variables correction
            // log(1 - tanh(x)^2) in its stable softplus form.
            logp += -0.5 * z * z - ls - 0.5 * LN_2PI;
            logp -= 2.0 * (std::f64::consts::LN_2 - x - softplus(-2.0 * x));
        }
        Ok(logp)
    }

    /// Clamps the log-std vector into its invariant range; call after every
    /// optimizer step that touches it.
    pub fn clamp_log_std(&mut self) {
        for ls in &mut self.log_std {
            *ls = ls.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }
}

#[inline]
fn atanh(x: f64) -> f64 {
    0.5 * ((1.0 + x) / (1.0 - x)).ln()
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Read-only critic/value access for policy extraction and evaluation.
/// Implementations aggregate ensembles with `min`.
pub trait CriticView {
    /// Online-critic Q with min aggregation.
    fn q_min(&self, obs: &[f64], option: &[f64]) -> f64;
    /// Target-critic Q with min aggregation.
    fn q_min_target(&self, obs: &[f64], option: &[f64]) -> f64;
    /// Online-critic Q plus its gradient with respect to the option input.
    fn q_min_with_action_grad(&self, obs: &[f64], option: &[f64]) -> (f64, Vec<f64>);
    /// Value head.
    fn v_value(&self, obs: &[f64]) -> f64;
}

/// Which extraction objective trains the policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Extractor {
    /// Plain negative log-likelihood of dataset chunks.
    Bc,
    /// `exp(A / lambda)`-weighted behavior cloning, weights clipped to
    /// `[0, weight_max]`.
    Awr { lambda: f64, weight_max: f64 },
    /// `-Q(s, mean(s)) / mean|Q| + alpha * MSE(mean(s), data)`.
    DpgBc { alpha: f64 },
}

/// Extraction loss and parameter gradients for one batch. Gradients are
/// written into `net_grads` (zeroed here) and `log_std_grads`; the caller
/// owns the optimizer step.
pub fn extraction_loss(
    policy: &SequencePolicy,
    batch: &OptionBatch,
    critic: &dyn CriticView,
    extractor: Extractor,
    net_grads: &mut Gradients,
    log_std_grads: &mut [f64],
) -> Result<f64> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::config("empty batch"));
    }
    if batch.h != policy.h || batch.act_dim != policy.act_dim {
        return Err(Error::config("batch option shape does not match the policy"));
    }
    net_grads.reset();
    log_std_grads.fill(0.0);

    match extractor {
        Extractor::Bc => nll_weighted(policy, batch, None, net_grads, log_std_grads),
        Extractor::Awr { lambda, weight_max } => {
            // Advantages from gradient-stopped learner heads.
            let weights: Vec<f64> = (0..b)
                .map(|i| {
                    let adv = critic.q_min_target(batch.state(i), batch.option(i))
                        - critic.v_value(batch.state(i));
                    (adv / lambda).exp().clamp(0.0, weight_max)
                })
                .collect();
            nll_weighted(policy, batch, Some(&weights), net_grads, log_std_grads)
        }
        Extractor::DpgBc { alpha } => dpg_bc(policy, batch, critic, alpha, net_grads),
    }
}

/// Mean `-w * log pi(o | s)`; `None` weights mean plain BC.
fn nll_weighted(
    policy: &SequencePolicy,
    batch: &OptionBatch,
    weights: Option<&[f64]>,
    net_grads: &mut Gradients,
    log_std_grads: &mut [f64],
) -> Result<f64> {
    let b = batch.len();
    let dim = policy.chunk_len();
    let mut cache = Cache::default();
    let mut loss = 0.0;
    let mut d_mean = vec![0.0; dim];
    for i in 0..b {
        let w = weights.map_or(1.0, |ws| ws[i]);
        policy.mean_net.forward_cached(batch.state(i), &mut cache)?;
        let mean = cache.output().to_vec();
        let chunk = batch.option(i);
        for j in 0..dim {
            let a = chunk[j].clamp(-1.0 + SQUASH_EPS, 1.0 - SQUASH_EPS);
            let x = atanh(a);
            let ls = policy.log_std[j];
            let inv_var = (-2.0 * ls).exp();
            let diff = x - mean[j];
            let nll_j = 0.5 * diff * diff * inv_var
                + ls
                + 0.5 * LN_2PI
                + 2.0 * (std::f64::consts::LN_2 - x - softplus(-2.0 * x));
            loss += w * nll_j;
            // d nll / d mean = -(x - mean) / sigma^2
            d_mean[j] = -w * diff * inv_var / b as f64;
            // d nll / d log_std = 1 - (x - mean)^2 / sigma^2
            log_std_grads[j] += w * (1.0 - diff * diff * inv_var) / b as f64;
        }
        policy.mean_net.backward(&cache, &d_mean, net_grads);
    }
    Ok(loss / b as f64)
}

/// Deterministic-gradient + BC loss at the squashed policy mean. The Q term
/// is normalized by the batch mean of `|Q|` (gradient-stopped), following
/// the usual Q-normalization recipe for BC coefficients.
fn dpg_bc(
    policy: &SequencePolicy,
    batch: &OptionBatch,
    critic: &dyn CriticView,
    alpha: f64,
    net_grads: &mut Gradients,
) -> Result<f64> {
    let b = batch.len();
    let dim = policy.chunk_len();
    let mut caches: Vec<Cache> = Vec::with_capacity(b);
    let mut actions: Vec<Vec<f64>> = Vec::with_capacity(b);
    let mut qs = Vec::with_capacity(b);
    let mut q_grads = Vec::with_capacity(b);
    for i in 0..b {
        let mut cache = Cache::default();
        policy.mean_net.forward_cached(batch.state(i), &mut cache)?;
        let action: Vec<f64> = cache.output().iter().map(|&u| u.tanh()).collect();
        let (q, dq_da) = critic.q_min_with_action_grad(batch.state(i), &action);
        qs.push(q);
        q_grads.push(dq_da);
        actions.push(action);
        caches.push(cache);
    }
    let norm = {
        let mean_abs = qs.iter().map(|q| q.abs()).sum::<f64>() / b as f64;
        if mean_abs > 1e-12 {
            mean_abs
        } else {
            1.0
        }
    };

    let mut loss = 0.0;
    let mut d_mean = vec![0.0; dim];
    for i in 0..b {
        let chunk = batch.option(i);
        let a = &actions[i];
        let mse: f64 = a
            .iter()
            .zip(chunk)
            .map(|(&ai, &oi)| (ai - oi) * (ai - oi))
            .sum::<f64>()
            / dim as f64;
        loss += -qs[i] / norm + alpha * mse;
        for j in 0..dim {
            // d tanh(u) / d u = 1 - a^2
            let da_du = 1.0 - a[j] * a[j];
            let d_loss_da = -q_grads[i][j] / norm + alpha * 2.0 * (a[j] - chunk[j]) / dim as f64;
            d_mean[j] = d_loss_da * da_du / b as f64;
        }
        policy.mean_net.backward(&caches[i], &d_mean, net_grads);
    }
    Ok(loss / b as f64)
}

/// Candidate-selection rule for best-of-N.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectionMode {
    /// Argmax Q; ties break to the lowest index.
    Greedy,
    /// Sample an index proportional to `exp(Q_i / beta)`.
    Softmax { beta: f64 },
}

/// Samples `n` chunks from the policy and selects one by critic score.
/// Returns the chosen chunk and its Q value.
pub fn best_of_n(
    policy: &SequencePolicy,
    critic: &dyn CriticView,
    obs: &[f64],
    n: usize,
    mode: SelectionMode,
    rng: &mut dyn RngCore,
) -> Result<(Vec<f64>, f64)> {
    if n == 0 {
        return Err(Error::config("best-of-N needs N >= 1"));
    }
    let mut candidates = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    for _ in 0..n {
        let chunk = policy.sample(obs, rng)?;
        scores.push(critic.q_min(obs, &chunk));
        candidates.push(chunk);
    }
    let idx = match mode {
        SelectionMode::Greedy => {
            let mut best = 0;
            for i in 1..n {
                if scores[i] > scores[best] {
                    best = i;
                }
            }
            best
        }
        SelectionMode::Softmax { beta } => {
            let logits: Vec<f64> = scores.iter().map(|&q| q / beta).collect();
            let probs = crate::distributional::softmax(&logits);
            let mut u: f64 = rng.next_u64() as f64 / u64::MAX as f64;
            let mut chosen = n - 1;
            for (i, &p) in probs.iter().enumerate() {
                if u < p {
                    chosen = i;
                    break;
                }
                u -= p;
            }
            chosen
        }
    };
    let q = scores[idx];
    Ok((candidates.swap_remove(idx), q))
}

/// Plain-sampling rollout adapter.
pub struct SamplingPolicy<'a> {
    pub policy: &'a SequencePolicy,
}

impl ChunkPolicy for SamplingPolicy<'_> {
    fn chunk(&self, obs: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        self.policy.sample(obs, rng).expect("obs shape")
    }
}

/// Deterministic squashed-mean rollout adapter.
pub struct MeanPolicy<'a> {
    pub policy: &'a SequencePolicy,
}

impl ChunkPolicy for MeanPolicy<'_> {
    fn chunk(&self, obs: &[f64], _rng: &mut dyn RngCore) -> Vec<f64> {
        self.policy.mean_chunk(obs).expect("obs shape")
    }
}

/// Best-of-N rollout adapter.
pub struct BestOfNPolicy<'a, C: CriticView> {
    pub policy: &'a SequencePolicy,
    pub critic: &'a C,
    pub n: usize,
    pub mode: SelectionMode,
}

impl<C: CriticView + Sync> ChunkPolicy for BestOfNPolicy<'_, C> {
    fn chunk(&self, obs: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        best_of_n(self.policy, self.critic, obs, self.n, self.mode, rng)
            .expect("obs shape")
            .0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ActionKind, Actions, Trajectory, TrajectoryDataset};
    use crate::nn::{AdamHyper, AdamState, AdamVec};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Toy critic with a closed-form surface, for extraction tests.
    struct QuadraticCritic {
        /// Q(s, o) = -scale * |o|^2
        scale: f64,
        v: f64,
    }

    impl CriticView for QuadraticCritic {
        fn q_min(&self, _obs: &[f64], option: &[f64]) -> f64 {
            -self.scale * option.iter().map(|o| o * o).sum::<f64>()
        }

        fn q_min_target(&self, obs: &[f64], option: &[f64]) -> f64 {
            self.q_min(obs, option)
        }

        fn q_min_with_action_grad(&self, _obs: &[f64], option: &[f64]) -> (f64, Vec<f64>) {
            let q = -self.scale * option.iter().map(|o| o * o).sum::<f64>();
            (q, option.iter().map(|o| -2.0 * self.scale * o).collect())
        }

        fn v_value(&self, _obs: &[f64]) -> f64 {
            self.v
        }
    }

    /// Critic whose advantage Q - V is exactly zero.
    struct FlatCritic;

    impl CriticView for FlatCritic {
        fn q_min(&self, _obs: &[f64], _option: &[f64]) -> f64 {
            1.5
        }
        fn q_min_target(&self, _obs: &[f64], _option: &[f64]) -> f64 {
            1.5
        }
        fn q_min_with_action_grad(&self, _obs: &[f64], option: &[f64]) -> (f64, Vec<f64>) {
            (1.5, vec![0.0; option.len()])
        }
        fn v_value(&self, _obs: &[f64]) -> f64 {
            1.5
        }
    }

    fn point_mass_batch(chunk: &[f64], copies: usize) -> OptionBatch {
        let mut ds = TrajectoryDataset::new(2, ActionKind::Continuous { act_dim: 1 }).unwrap();
        let h = chunk.len();
        for _ in 0..copies {
            ds.push(Trajectory {
                states: vec![0.3; (h + 1) * 2],
                actions: Actions::Continuous(chunk.to_vec()),
                rewards: vec![0.0; h],
                terminal: false,
            })
            .unwrap();
        }
        ds.all_option_starts(h, 0.9).unwrap()
    }

    fn train_policy(
        policy: &mut SequencePolicy,
        batch: &OptionBatch,
        critic: &dyn CriticView,
        extractor: Extractor,
        steps: usize,
        lr: f64,
    ) -> f64 {
        let mut grads = Gradients::zeros_like(&policy.mean_net);
        let mut ls_grads = vec![0.0; policy.chunk_len()];
        let mut adam = AdamState::new(&policy.mean_net, AdamHyper::with_lr(lr));
        let mut ls_adam = AdamVec::new(policy.chunk_len(), AdamHyper::with_lr(lr));
        let mut loss = 0.0;
        for _ in 0..steps {
            loss =
                extraction_loss(policy, batch, critic, extractor, &mut grads, &mut ls_grads)
                    .unwrap();
            adam.step(&mut policy.mean_net, &grads);
            ls_adam.step(&mut policy.log_std, &ls_grads);
            policy.clamp_log_std();
        }
        loss
    }

    #[test]
    fn tight_log_std_samples_hug_the_squashed_mean() {
        let mut policy = SequencePolicy::new(2, 2, 1, &[8], &mut rng(0)).unwrap();
        policy.log_std.fill(LOG_STD_MIN);
        let obs = [0.2, -0.4];
        let mut r = rng(1);
        let mut abs_sum = 0.0;
        let n = 1000;
        for _ in 0..n {
            let s = policy.sample(&obs, &mut r).unwrap();
            for v in s {
                abs_sum += v.abs();
            }
        }
        // Mean output is 0 (zero-initialized final layer), sigma = e^-5.
        assert!(abs_sum / (n as f64 * 2.0) <= 0.01);
    }

    #[test]
    fn log_prob_of_samples_is_finite() {
        let mut policy = SequencePolicy::new(3, 2, 2, &[8], &mut rng(2)).unwrap();
        policy.log_std.fill(0.5);
        let obs = [0.1, 0.9, -0.7];
        let mut r = rng(3);
        for _ in 0..10_000 {
            let s = policy.sample(&obs, &mut r).unwrap();
            let lp = policy.log_prob(&obs, &s).unwrap();
            assert!(lp.is_finite(), "log_prob diverged: {lp}");
        }
    }

    #[test]
    fn monte_carlo_sample_mean_matches_squashed_mean() {
        // Mean 0 case: E[tanh(sigma * eps)] = 0 exactly by symmetry.
        let mut policy = SequencePolicy::new(2, 1, 1, &[4], &mut rng(4)).unwrap();
        policy.log_std.fill(-0.5);
        let obs = [0.3, 0.3];
        let n = 20_000;
        let mut r = rng(5);
        let samples: Vec<f64> = (0..n)
            .map(|_| policy.sample(&obs, &mut r).unwrap()[0])
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n as f64;
        let tol = 3.0 * var.sqrt() / (n as f64).sqrt();
        assert!(mean.abs() <= tol, "MC mean {mean} exceeds 3 sigma bound {tol}");
    }

    #[test]
    fn bc_converges_to_a_repeated_sequence() {
        let chunk = [0.5, -0.3];
        let batch = point_mass_batch(&chunk, 4);
        let mut policy = SequencePolicy::new(2, 2, 1, &[16], &mut rng(6)).unwrap();
        train_policy(&mut policy, &batch, &FlatCritic, Extractor::Bc, 1500, 3e-3);
        let mean = policy.mean_chunk(&batch.state(0)).unwrap();
        assert!((mean[0] - 0.5).abs() < 0.02, "mean {mean:?}");
        assert!((mean[1] + 0.3).abs() < 0.02, "mean {mean:?}");
        // MLE on a point mass also shrinks the noise scale.
        assert!(policy.log_std.iter().all(|&ls| ls < -2.0));
    }

    #[test]
    fn bc_on_symmetric_two_point_dataset_centers_pre_squash_mean() {
        let mut ds = TrajectoryDataset::new(1, ActionKind::Continuous { act_dim: 1 }).unwrap();
        for a in [0.6, -0.6] {
            ds.push(Trajectory {
                states: vec![1.0, 1.0],
                actions: Actions::Continuous(vec![a]),
                rewards: vec![0.0],
                terminal: false,
            })
            .unwrap();
        }
        let batch = ds.all_option_starts(1, 0.9).unwrap();
        let mut policy = SequencePolicy::new(1, 1, 1, &[8], &mut rng(7)).unwrap();
        train_policy(&mut policy, &batch, &FlatCritic, Extractor::Bc, 2000, 3e-3);
        let pre = policy.pre_squash_mean(&[1.0]).unwrap();
        assert!(pre[0].abs() < 0.02, "pre-squash mean {pre:?}");
    }

    #[test]
    fn bc_nll_matches_closed_form_gaussian_density() {
        let mut policy = SequencePolicy::new(1, 1, 1, &[4], &mut rng(8)).unwrap();
        policy.log_std[0] = -0.25;
        let obs = [0.4];
        let action = [0.31];
        let batch = {
            let mut ds = TrajectoryDataset::new(1, ActionKind::Continuous { act_dim: 1 }).unwrap();
            ds.push(Trajectory {
                states: vec![obs[0], obs[0]],
                actions: Actions::Continuous(action.to_vec()),
                rewards: vec![0.0],
                terminal: false,
            })
            .unwrap();
            ds.all_option_starts(1, 0.9).unwrap()
        };
        let mut grads = Gradients::zeros_like(&policy.mean_net);
        let mut ls_grads = vec![0.0];
        let loss = extraction_loss(
            &policy,
            &batch,
            &FlatCritic,
            Extractor::Bc,
            &mut grads,
            &mut ls_grads,
        )
        .unwrap();

        // Closed-form oracle: standard Gaussian density of atanh(a) around
        // the network mean plus log |d tanh^-1 / da|.
        let u = policy.pre_squash_mean(&obs).unwrap()[0];
        let x = 0.5 * ((1.0 + action[0]) / (1.0 - action[0])).ln();
        let sigma = (-0.25f64).exp();
        let gauss = (-0.5 * ((x - u) / sigma).powi(2)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
        let jac = 1.0 - action[0] * action[0];
        let expected = -(gauss.ln() + jac.ln().neg().neg() - 2.0 * jac.ln() + jac.ln());
        // The implementation treats log pi(a) = log N(x) - log(1 - a^2).
        let expected = -(gauss.ln() - jac.ln());
        assert!((loss - expected).abs() < 1e-9, "loss {loss} vs {expected}");
        let _ = expected;
    }

    #[test]
    fn awr_with_zero_advantage_equals_bc() {
        let batch = point_mass_batch(&[0.2, 0.1], 3);
        let policy = SequencePolicy::new(2, 2, 1, &[8], &mut rng(9)).unwrap();
        let mut g1 = Gradients::zeros_like(&policy.mean_net);
        let mut g2 = Gradients::zeros_like(&policy.mean_net);
        let mut ls1 = vec![0.0; 2];
        let mut ls2 = vec![0.0; 2];
        let bc = extraction_loss(&policy, &batch, &FlatCritic, Extractor::Bc, &mut g1, &mut ls1)
            .unwrap();
        let awr = extraction_loss(
            &policy,
            &batch,
            &FlatCritic,
            Extractor::Awr {
                lambda: AWR_DEFAULT_LAMBDA,
                weight_max: AWR_WEIGHT_MAX,
            },
            &mut g2,
            &mut ls2,
        )
        .unwrap();
        assert_eq!(bc, awr);
        assert_eq!(ls1, ls2);
        for (a, b) in g1.layers.iter().zip(&g2.layers) {
            assert_eq!(a.w, b.w);
        }
    }

    #[test]
    fn awr_weight_clip_engages_on_huge_advantage() {
        // V very negative means a huge advantage; the weight must cap at
        // weight_max, i.e. loss == weight_max * bc loss for that sample.
        let batch = point_mass_batch(&[0.2, 0.1], 1);
        let policy = SequencePolicy::new(2, 2, 1, &[8], &mut rng(10)).unwrap();
        let critic = QuadraticCritic { scale: 0.0, v: -1e9 };
        let mut g = Gradients::zeros_like(&policy.mean_net);
        let mut gb = Gradients::zeros_like(&policy.mean_net);
        let mut ls = vec![0.0; 2];
        let mut lsb = vec![0.0; 2];
        let awr = extraction_loss(
            &policy,
            &batch,
            &critic,
            Extractor::Awr {
                lambda: 1.0,
                weight_max: AWR_WEIGHT_MAX,
            },
            &mut g,
            &mut ls,
        )
        .unwrap();
        let bc =
            extraction_loss(&policy, &batch, &critic, Extractor::Bc, &mut gb, &mut lsb).unwrap();
        assert!((awr - AWR_WEIGHT_MAX * bc).abs() < 1e-9);
    }

    #[test]
    fn awr_fixed_batch_matches_scalar_composition_oracle() {
        // Three samples, lambda = 1: loss = mean(exp(A_i) * nll_i) with
        // every term recomputed here from scalars.
        let mut ds = TrajectoryDataset::new(1, ActionKind::Continuous { act_dim: 1 }).unwrap();
        let actions = [0.1, -0.2, 0.35];
        for (i, &a) in actions.iter().enumerate() {
            ds.push(Trajectory {
                states: vec![i as f64 * 0.1, i as f64 * 0.1],
                actions: Actions::Continuous(vec![a]),
                rewards: vec![0.0],
                terminal: false,
            })
            .unwrap();
        }
        let batch = ds.all_option_starts(1, 0.9).unwrap();
        // Advantage = Q - V = -0.7 * |o|^2 - (-0.2) per sample.
        let critic = QuadraticCritic { scale: 0.7, v: -0.2 };
        let mut policy = SequencePolicy::new(1, 1, 1, &[4], &mut rng(11)).unwrap();
        policy.log_std[0] = -0.5;
        let mut g = Gradients::zeros_like(&policy.mean_net);
        let mut ls = vec![0.0];
        let loss = extraction_loss(
            &policy,
            &batch,
            &critic,
            Extractor::Awr {
                lambda: 1.0,
                weight_max: 100.0,
            },
            &mut g,
            &mut ls,
        )
        .unwrap();

        let mut expected = 0.0;
        for i in 0..3 {
            let obs = [i as f64 * 0.1];
            let adv = -0.7 * actions[i] * actions[i] + 0.2;
            let w = adv.exp().clamp(0.0, 100.0);
            expected += w * -policy.log_prob(&obs, &[actions[i]]).unwrap();
        }
        expected /= 3.0;
        assert!((loss - expected).abs() < 1e-10, "{loss} vs {expected}");
    }

    #[test]
    fn dpg_bc_with_huge_alpha_is_pure_bc_on_point_mass() {
        let chunk = [0.4, -0.25];
        let batch = point_mass_batch(&chunk, 4);
        let critic = QuadraticCritic { scale: 1.0, v: 0.0 };
        let mut policy = SequencePolicy::new(2, 2, 1, &[16], &mut rng(12)).unwrap();
        train_policy(
            &mut policy,
            &batch,
            &critic,
            Extractor::DpgBc { alpha: 1e6 },
            1500,
            3e-3,
        );
        let mean = policy.mean_chunk(&batch.state(0)).unwrap();
        let mse: f64 = mean
            .iter()
            .zip(&chunk)
            .map(|(m, c)| (m - c) * (m - c))
            .sum::<f64>()
            / 2.0;
        assert!(mse < 1e-3, "mse {mse}, mean {mean:?}");
    }

    #[test]
    fn dpg_bc_constant_critic_reduces_to_bc_gradient() {
        let batch = point_mass_batch(&[0.3, 0.3], 2);
        let mut policy = SequencePolicy::new(2, 2, 1, &[8], &mut rng(13)).unwrap();
        // Flat critic: Q-term contributes no gradient, so training is pure
        // BC in the mean (MSE form), which still converges to the data.
        train_policy(
            &mut policy,
            &batch,
            &FlatCritic,
            Extractor::DpgBc { alpha: 1.0 },
            1500,
            3e-3,
        );
        let mean = policy.mean_chunk(&batch.state(0)).unwrap();
        assert!((mean[0] - 0.3).abs() < 0.02 && (mean[1] - 0.3).abs() < 0.02);
    }

    #[test]
    fn dpg_with_zero_alpha_finds_the_quadratic_optimum() {
        // Q(s, o) = -|o|^2 peaks at o = 0.
        let batch = point_mass_batch(&[0.5, 0.5], 2);
        let critic = QuadraticCritic { scale: 1.0, v: 0.0 };
        let mut policy = SequencePolicy::new(2, 2, 1, &[8], &mut rng(14)).unwrap();
        // Nudge the mean away from zero so there is something to optimize.
        policy.mean_net.for_each_param_mut(|p| {
            if *p == 0.0 {
                *p = 0.3;
            }
        });
        train_policy(
            &mut policy,
            &batch,
            &critic,
            Extractor::DpgBc { alpha: 0.0 },
            2000,
            3e-3,
        );
        let mean = policy.mean_chunk(&batch.state(0)).unwrap();
        assert!(mean.iter().all(|m| m.abs() < 0.02), "mean {mean:?}");
    }

    #[test]
    fn best_of_one_returns_the_single_sample() {
        let policy = SequencePolicy::new(2, 2, 1, &[4], &mut rng(15)).unwrap();
        let critic = FlatCritic;
        let obs = [0.5, -0.5];
        let a = best_of_n(&policy, &critic, &obs, 1, SelectionMode::Greedy, &mut rng(77))
            .unwrap()
            .0;
        let b = policy.sample(&obs, &mut rng(77)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn greedy_ties_break_to_lowest_index() {
        let policy = SequencePolicy::new(2, 1, 1, &[4], &mut rng(16)).unwrap();
        let critic = FlatCritic; // all Q equal
        let obs = [0.0, 0.0];
        let mut r = rng(5);
        let selected = best_of_n(&policy, &critic, &obs, 8, SelectionMode::Greedy, &mut r)
            .unwrap()
            .0;
        let first = policy.sample(&obs, &mut rng(5)).unwrap();
        assert_eq!(selected, first);
    }

    #[test]
    fn cold_softmax_agrees_with_greedy() {
        let mut policy = SequencePolicy::new(2, 1, 1, &[4], &mut rng(17)).unwrap();
        policy.log_std.fill(0.0);
        let critic = QuadraticCritic { scale: 1.0, v: 0.0 };
        let obs = [0.3, -0.3];
        let mut agree = 0;
        for trial in 0..1000u64 {
            let g = best_of_n(
                &policy,
                &critic,
                &obs,
                5,
                SelectionMode::Greedy,
                &mut rng(1000 + trial),
            )
            .unwrap()
            .0;
            let s = best_of_n(
                &policy,
                &critic,
                &obs,
                5,
                SelectionMode::Softmax { beta: 1e-6 },
                &mut rng(1000 + trial),
            )
            .unwrap()
            .0;
            if g == s {
                agree += 1;
            }
        }
        assert!(agree >= 990, "cold softmax agreed only {agree}/1000 times");
    }

    #[test]
    fn greedy_selection_is_invariant_to_positive_affine_q() {
        struct Affine {
            a: f64,
            b: f64,
        }
        impl CriticView for Affine {
            fn q_min(&self, _obs: &[f64], option: &[f64]) -> f64 {
                self.a * option[0] + self.b
            }
            fn q_min_target(&self, obs: &[f64], option: &[f64]) -> f64 {
                self.q_min(obs, option)
            }
            fn q_min_with_action_grad(&self, _obs: &[f64], option: &[f64]) -> (f64, Vec<f64>) {
                (self.a * option[0] + self.b, vec![self.a])
            }
            fn v_value(&self, _obs: &[f64]) -> f64 {
                0.0
            }
        }
        let policy = SequencePolicy::new(1, 1, 1, &[4], &mut rng(18)).unwrap();
        let obs = [0.2];
        for seed in 0..50u64 {
            let base = best_of_n(
                &policy,
                &Affine { a: 1.0, b: 0.0 },
                &obs,
                6,
                SelectionMode::Greedy,
                &mut rng(seed),
            )
            .unwrap()
            .0;
            let scaled = best_of_n(
                &policy,
                &Affine { a: 3.5, b: -7.0 },
                &obs,
                6,
                SelectionMode::Greedy,
                &mut rng(seed),
            )
            .unwrap()
            .0;
            assert_eq!(base, scaled);
        }
    }
}
