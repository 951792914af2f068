//! Exact brute-force oracles on tabular MDPs: SMDP Q-iteration over
//! enumerated action sequences, and the dataset-conditioned expectile value
//! fixed point that grounds the learner's acceptance tests.

use std::collections::BTreeMap;

use crate::dataset::TrajectoryDataset;
use crate::error::{Error, Result};

use super::TabularMdp;

/// Refuse to enumerate more option sequences than this.
pub const ORACLE_OPTION_BUDGET: usize = 1_000_000;

/// Exact Q table over `(state, option)` pairs where an option is one of the
/// `n_actions^h` action sequences.
#[derive(Debug, Clone)]
pub struct SmdpQTable {
    pub h: usize,
    pub n_actions: usize,
    pub n_options: usize,
    /// `s * n_options + option_index`
    pub q: Vec<f64>,
}

impl SmdpQTable {
    /// Encodes an action sequence as an option index (first action is the
    /// most significant digit).
    pub fn encode(&self, actions: &[usize]) -> usize {
        debug_assert_eq!(actions.len(), self.h);
        actions.iter().fold(0, |acc, &a| acc * self.n_actions + a)
    }

    pub fn decode(&self, mut option: usize) -> Vec<usize> {
        let mut out = vec![0; self.h];
        for slot in out.iter_mut().rev() {
            *slot = option % self.n_actions;
            option /= self.n_actions;
        }
        out
    }

    pub fn value(&self, s: usize, option: usize) -> f64 {
        self.q[s * self.n_options + option]
    }

    /// `max_o Q(s, o)`.
    pub fn max_value(&self, s: usize) -> f64 {
        self.q[s * self.n_options..(s + 1) * self.n_options]
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Exact fixed point of the SMDP Bellman optimality operator
/// `Q(s, o) = R̂(s, o) + gamma2^H max_{o'} Q(s', o')` by value iteration to
/// 1e-10 sup-norm over all enumerated options.
pub fn oracle_smdp_q(mdp: &TabularMdp, h: usize, gamma1: f64, gamma2: f64) -> Result<SmdpQTable> {
    if h == 0 {
        return Err(Error::config("option length must be at least 1"));
    }
    let n_options = mdp
        .n_actions
        .checked_pow(h as u32)
        .filter(|&n| n <= ORACLE_OPTION_BUDGET)
        .ok_or_else(|| {
            Error::Budget(format!(
                "{}^{h} option sequences exceed the {ORACLE_OPTION_BUDGET} budget",
                mdp.n_actions
            ))
        })?;

    let mut table = SmdpQTable {
        h,
        n_actions: mdp.n_actions,
        n_options,
        q: vec![0.0; mdp.n_states * n_options],
    };

    // Precompute intra-option returns and end states.
    let mut intra = vec![0.0; mdp.n_states * n_options];
    let mut ends = vec![0usize; mdp.n_states * n_options];
    for s in 0..mdp.n_states {
        for o in 0..n_options {
            let actions = table.decode(o);
            let (r_hat, s_end) = mdp.simulate_option(s, &actions, gamma1);
            intra[s * n_options + o] = r_hat;
            ends[s * n_options + o] = s_end;
        }
    }

    let boot = gamma2.powi(h as i32);
    let mut next = table.q.clone();
    for _ in 0..200_000 {
        let mut max_of: Vec<f64> = (0..mdp.n_states)
            .map(|s| table.max_value(s))
            .collect();
        // An all-zero table has max 0 everywhere, which is what we want on
        // the first sweep.
        for v in &mut max_of {
            if !v.is_finite() {
                *v = 0.0;
            }
        }
        let mut delta = 0.0f64;
        for s in 0..mdp.n_states {
            for o in 0..n_options {
                let idx = s * n_options + o;
                let v = intra[idx] + boot * max_of[ends[idx]];
                delta = delta.max((v - table.q[idx]).abs());
                next[idx] = v;
            }
        }
        std::mem::swap(&mut table.q, &mut next);
        if delta <= 1e-10 {
            return Ok(table);
        }
    }
    Err(Error::config("SMDP value iteration did not converge"))
}

/// Expectile of a finite sample: the unique root of
/// `sum_i |tau - 1(x_i < v)| (x_i - v) = 0`, found by bisection. Ties
/// (`x_i = v`) carry weight `tau`, matching the `>=` convention.
pub fn sample_expectile(xs: &[f64], tau: f64) -> f64 {
    assert!(!xs.is_empty(), "expectile of an empty sample");
    assert!((0.0..=1.0).contains(&tau), "tau must lie in [0, 1]");
    let mut lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi || tau == 0.0 {
        return if tau == 0.0 { lo } else if tau == 1.0 { hi } else { lo };
    }
    if tau == 1.0 {
        return hi;
    }
    let g = |v: f64| -> f64 {
        xs.iter()
            .map(|&x| {
                let w = if x < v { 1.0 - tau } else { tau };
                w * (x - v)
            })
            .sum()
    };
    // g is strictly decreasing with g(lo) >= 0 >= g(hi).
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * (1.0 + lo.abs().max(hi.abs())) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// One in-dataset option occurrence at a state: intra return, end state,
/// and bootstrap mask.
#[derive(Debug, Clone, Copy)]
struct OptionSample {
    r_hat: f64,
    s_end: usize,
    mask: f64,
    option_key: u64,
}

/// Fixed point of `V(s) = expectile_tau { R̂(s, o) + gamma2^H V(s') }` over
/// the option occurrences actually present in the dataset, keyed by exact
/// `(state, option)` pairs. States with no outgoing option are excluded
/// from the table (and bootstrap as zero where referenced).
#[derive(Debug, Clone)]
pub struct ExpectileOracle {
    pub h: usize,
    pub gamma2: f64,
    /// `None` where the dataset never starts an option.
    pub v: Vec<Option<f64>>,
    /// States flagged as uncovered.
    pub uncovered: Vec<usize>,
    /// How many bootstrap targets referenced an uncovered state.
    pub uncovered_bootstrap_refs: usize,
    /// Unique `(state, option key)` pairs with their oracle Q value.
    pub q: BTreeMap<(usize, u64), f64>,
    /// Occurrence count per unique pair, for dataset-weighted means.
    pub occurrences: BTreeMap<(usize, u64), usize>,
}

impl ExpectileOracle {
    pub fn v_of(&self, s: usize) -> Option<f64> {
        self.v.get(s).copied().flatten()
    }

    /// Encodes an action sequence into the oracle's option key.
    pub fn option_key(actions: &[usize], n_actions: usize) -> u64 {
        actions
            .iter()
            .fold(0u64, |acc, &a| acc * n_actions as u64 + a as u64)
    }
}

/// Computes the dataset-conditioned expectile fixed point for a tabular
/// chain dataset. Observations must decode to discrete states via
/// `decode_state`; actions must be stored discrete.
pub fn oracle_expectile_v(
    mdp: &TabularMdp,
    dataset: &TrajectoryDataset,
    decode_state: impl Fn(&[f64]) -> usize,
    h: usize,
    gamma1: f64,
    gamma2: f64,
    tau: f64,
) -> Result<ExpectileOracle> {
    if h == 0 || dataset.num_trajectories() == 0 {
        return Err(Error::config("expectile oracle needs h >= 1 and a non-empty dataset"));
    }
    let boot = gamma2.powi(h as i32);

    // Gather option occurrences per state.
    let mut per_state: Vec<Vec<OptionSample>> = vec![Vec::new(); mdp.n_states];
    let mut occurrences: BTreeMap<(usize, u64), usize> = BTreeMap::new();
    let mut actions_buf = vec![0usize; h];
    for (ti, traj) in dataset.trajectories().iter().enumerate() {
        if traj.len() < h {
            return Err(Error::config("trajectory shorter than the option length"));
        }
        for t in 0..=(traj.len() - h) {
            let s = decode_state(dataset.state(ti, t));
            if s >= mdp.n_states {
                return Err(Error::config(format!("decoded state {s} out of range")));
            }
            for (k, slot) in actions_buf.iter_mut().enumerate() {
                *slot = dataset
                    .discrete_action(ti, t + k)
                    .ok_or_else(|| Error::config("expectile oracle needs discrete actions"))?;
            }
            let (r_hat, s_end) = mdp.simulate_option(s, &actions_buf, gamma1);
            let mask = if traj.terminal && t + h == traj.len() {
                0.0
            } else {
                1.0
            };
            let key = ExpectileOracle::option_key(&actions_buf, mdp.n_actions);
            per_state[s].push(OptionSample {
                r_hat,
                s_end,
                mask,
                option_key: key,
            });
            *occurrences.entry((s, key)).or_insert(0) += 1;
        }
    }

    let covered: Vec<bool> = per_state.iter().map(|v| !v.is_empty()).collect();
    let uncovered: Vec<usize> = (0..mdp.n_states).filter(|&s| !covered[s]).collect();
    let mut uncovered_refs = 0usize;
    for samples in &per_state {
        for s in samples {
            if s.mask > 0.0 && !covered[s.s_end] {
                uncovered_refs += 1;
            }
        }
    }

    // Expectile fixed point; the map contracts with factor gamma2^H.
    let mut v = vec![0.0f64; mdp.n_states];
    let mut targets: Vec<f64> = Vec::new();
    let mut converged = false;
    for _ in 0..200_000 {
        let mut delta = 0.0f64;
        for s in 0..mdp.n_states {
            if !covered[s] {
                continue;
            }
            targets.clear();
            targets.extend(per_state[s].iter().map(|smp| {
                let bootstrap = if covered[smp.s_end] { v[smp.s_end] } else { 0.0 };
                smp.r_hat + boot * smp.mask * bootstrap
            }));
            let new_v = sample_expectile(&targets, tau);
            delta = delta.max((new_v - v[s]).abs());
            v[s] = new_v;
        }
        if delta <= 1e-10 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::config("expectile fixed point did not converge"));
    }

    // Oracle Q per unique (s, o): R̂ + gamma2^H * mask * V(s_end).
    let mut q = BTreeMap::new();
    for (s, samples) in per_state.iter().enumerate() {
        for smp in samples {
            let bootstrap = if covered[smp.s_end] { v[smp.s_end] } else { 0.0 };
            q.insert((s, smp.option_key), smp.r_hat + boot * smp.mask * bootstrap);
        }
    }

    Ok(ExpectileOracle {
        h,
        gamma2,
        v: (0..mdp.n_states)
            .map(|s| covered[s].then_some(v[s]))
            .collect(),
        uncovered,
        uncovered_bootstrap_refs: uncovered_refs,
        q,
        occurrences,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{chain_env_with, collect_chain_data, ChainTask};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_action_mdp_q_is_closed_form_return() {
        // One action: the chain advances deterministically, no maximization.
        let mdp = chain_env_with(2, 1, 1, 10).unwrap();
        let (h, g1, g2) = (2usize, 0.9, 0.95);
        let table = oracle_smdp_q(&mdp, h, g1, g2).unwrap();

        // Closed form: roll the single option forever (truncated far beyond
        // the discount horizon).
        let boot = g2.powi(h as i32);
        for s in 0..mdp.n_states {
            let mut expected = 0.0;
            let mut state = s;
            let mut scale = 1.0;
            for _ in 0..2000 {
                let (r_hat, s_end) = mdp.simulate_option(state, &[0, 0], g1);
                expected += scale * r_hat;
                scale *= boot;
                state = s_end;
            }
            assert!((table.value(s, 0) - expected).abs() < 1e-8, "state {s}");
        }
    }

    #[test]
    fn h1_oracle_equals_textbook_q_iteration() {
        let mdp = chain_env_with(2, 2, 3, 30).unwrap();
        let gamma = 0.9;
        let table = oracle_smdp_q(&mdp, 1, 0.42, gamma).unwrap();

        // Independent plain Q-iteration.
        let mut q = vec![0.0f64; mdp.n_states * mdp.n_actions];
        for _ in 0..10_000 {
            let mut delta = 0.0f64;
            let maxes: Vec<f64> = (0..mdp.n_states)
                .map(|s| {
                    (0..mdp.n_actions)
                        .map(|a| q[s * mdp.n_actions + a])
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            for s in 0..mdp.n_states {
                for a in 0..mdp.n_actions {
                    let v = mdp.reward(s, a) + gamma * maxes[mdp.next_state(s, a)];
                    delta = delta.max((v - q[s * mdp.n_actions + a]).abs());
                    q[s * mdp.n_actions + a] = v;
                }
            }
            if delta < 1e-12 {
                break;
            }
        }
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                assert!(
                    (table.value(s, a) - q[s * mdp.n_actions + a]).abs() <= 1e-9,
                    "(s, a) = ({s}, {a})"
                );
            }
        }
    }

    #[test]
    fn chain_q_matches_exhaustive_greedy_rollout() {
        let mdp = chain_env_with(2, 2, 3, 40).unwrap();
        let (h, g1, g2) = (2usize, 0.9, 0.99);
        let table = oracle_smdp_q(&mdp, h, g1, g2).unwrap();
        let boot = g2.powi(h as i32);
        // Rollout depth chosen so the truncation error is below 1e-7.
        let depth = ((1e-9f64.ln()) / boot.ln()).ceil() as usize;
        for s in 0..mdp.n_states {
            for o in 0..table.n_options {
                let mut total = 0.0;
                let mut scale = 1.0;
                let (r0, mut state) = mdp.simulate_option(s, &table.decode(o), g1);
                total += r0;
                scale *= boot;
                for _ in 0..depth {
                    // Greedy continuation under the converged table.
                    let best = (0..table.n_options)
                        .max_by(|&a, &b| {
                            table
                                .value(state, a)
                                .partial_cmp(&table.value(state, b))
                                .unwrap()
                        })
                        .unwrap();
                    let (r, next) = mdp.simulate_option(state, &table.decode(best), g1);
                    total += scale * r;
                    scale *= boot;
                    state = next;
                }
                assert!(
                    (table.value(s, o) - total).abs() < 1e-6,
                    "s={s}, o={o}: {} vs {total}",
                    table.value(s, o)
                );
            }
        }
    }

    #[test]
    fn budget_guard_rejects_huge_enumerations() {
        let mdp = chain_env_with(1, 1, 10, 10).unwrap();
        assert!(matches!(
            oracle_smdp_q(&mdp, 7, 0.9, 0.99),
            Err(Error::Budget(_))
        ));
    }

    #[test]
    fn expectile_of_sample_mean_and_extremes() {
        let xs = [1.0, 2.0, 7.0, -3.0];
        let mean = xs.iter().sum::<f64>() / 4.0;
        assert!((sample_expectile(&xs, 0.5) - mean).abs() < 1e-10);
        assert_eq!(sample_expectile(&xs, 1.0), 7.0);
        assert_eq!(sample_expectile(&xs, 0.0), -3.0);
    }

    #[test]
    fn expectile_is_monotone_in_tau() {
        let xs = [0.0, 1.0, 1.5, 4.0, -2.0];
        let mut prev = f64::NEG_INFINITY;
        for tau in [0.1, 0.3, 0.5, 0.7, 0.9, 0.99] {
            let e = sample_expectile(&xs, tau);
            assert!(e >= prev - 1e-12);
            prev = e;
        }
    }

    #[test]
    fn expectile_matches_stochastic_approximation_cross_check() {
        // 10^6-iteration Robbins-Monro on the asymmetric-least-squares
        // gradient, uniform resampling of the fixed sample.
        let xs = [0.0, -1.0, 2.5, 4.0, -3.0, 1.0];
        let tau = 0.9;
        let exact = sample_expectile(&xs, tau);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut v = 0.0f64;
        for k in 1..=1_000_000u64 {
            let x = xs[rand::Rng::random_range(&mut rng, 0..xs.len())];
            let w = if x < v { 1.0 - tau } else { tau };
            let step = 2.0 / (1000.0 + k as f64 / 50.0);
            v += step * w * (x - v);
        }
        let spread = 7.0;
        assert!(
            (v - exact).abs() < 0.02 * spread,
            "SA {v} vs exact {exact}"
        );
    }

    fn chain_fixture() -> (TabularMdp, TrajectoryDataset) {
        let mdp = chain_env_with(2, 2, 3, 25).unwrap();
        let task = ChainTask::new(mdp.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let ds = collect_chain_data(&task, 80, 0.35, &mut rng).unwrap();
        (mdp, ds)
    }

    #[test]
    fn tau_half_equals_in_sample_mean_fixed_point() {
        let (mdp, ds) = chain_fixture();
        let oracle =
            oracle_expectile_v(&mdp, &ds, ChainTask::state_of_obs, 2, 0.9, 0.95, 0.5).unwrap();

        // Independent mean-backup fixed point over the same samples.
        let h = 2;
        let boot: f64 = 0.95f64.powi(h as i32);
        let mut samples: Vec<Vec<(f64, usize)>> = vec![Vec::new(); mdp.n_states];
        for (ti, traj) in ds.trajectories().iter().enumerate() {
            for t in 0..=(traj.len() - h) {
                let s = ChainTask::state_of_obs(ds.state(ti, t));
                let acts: Vec<usize> = (0..h)
                    .map(|k| ds.discrete_action(ti, t + k).unwrap())
                    .collect();
                let (r_hat, s_end) = mdp.simulate_option(s, &acts, 0.9);
                samples[s].push((r_hat, s_end));
            }
        }
        let mut v = vec![0.0f64; mdp.n_states];
        for _ in 0..20_000 {
            let mut delta = 0.0f64;
            for s in 0..mdp.n_states {
                if samples[s].is_empty() {
                    continue;
                }
                let mean = samples[s]
                    .iter()
                    .map(|&(r, e)| r + boot * v[e])
                    .sum::<f64>()
                    / samples[s].len() as f64;
                delta = delta.max((mean - v[s]).abs());
                v[s] = mean;
            }
            if delta < 1e-12 {
                break;
            }
        }
        for s in 0..mdp.n_states {
            if let Some(ov) = oracle.v_of(s) {
                assert!((ov - v[s]).abs() < 1e-7, "state {s}: {ov} vs {}", v[s]);
            }
        }
    }

    #[test]
    fn optimal_only_dataset_with_high_tau_approaches_smdp_max() {
        // Build a dataset containing only the optimal option stream.
        let mdp = chain_env_with(2, 2, 3, 24).unwrap();
        let task = ChainTask::new(mdp.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ds = collect_chain_data(&task, 12, 0.0, &mut rng).unwrap();
        let (h, g1, g2) = (2usize, 0.9, 0.95);
        let oracle =
            oracle_expectile_v(&mdp, &ds, ChainTask::state_of_obs, h, g1, g2, 0.999).unwrap();
        let qstar = oracle_smdp_q(&mdp, h, g1, g2).unwrap();
        for s in 0..mdp.n_states {
            if let Some(v) = oracle.v_of(s) {
                assert!(
                    (v - qstar.max_value(s)).abs() < 0.05,
                    "state {s}: {v} vs {}",
                    qstar.max_value(s)
                );
            }
        }
    }

    #[test]
    fn expectile_oracle_v_is_monotone_in_tau() {
        let (mdp, ds) = chain_fixture();
        let taus = [0.5, 0.7, 0.9];
        let tables: Vec<_> = taus
            .iter()
            .map(|&tau| {
                oracle_expectile_v(&mdp, &ds, ChainTask::state_of_obs, 2, 0.9, 0.95, tau).unwrap()
            })
            .collect();
        for s in 0..mdp.n_states {
            for w in tables.windows(2) {
                if let (Some(lo), Some(hi)) = (w[0].v_of(s), w[1].v_of(s)) {
                    assert!(hi >= lo - 1e-9, "state {s}: tau order violated ({lo} vs {hi})");
                }
            }
        }
    }

    #[test]
    fn mixed_quality_chain_oracle_is_reproducible_reference() {
        let (mdp, ds) = chain_fixture();
        let a = oracle_expectile_v(&mdp, &ds, ChainTask::state_of_obs, 2, 0.9, 0.99, 0.9).unwrap();
        let b = oracle_expectile_v(&mdp, &ds, ChainTask::state_of_obs, 2, 0.9, 0.99, 0.9).unwrap();
        assert_eq!(a.v, b.v);
        assert!(!a.q.is_empty());
        // Every oracle Q must be consistent with its own V backup rule.
        for (&(s, _), &q) in &a.q {
            assert!(a.v_of(s).is_some());
            assert!(q.is_finite());
        }
    }
}
