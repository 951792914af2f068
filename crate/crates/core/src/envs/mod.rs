//! Deterministic toy environments with semi-sparse rewards (negative count
//! of uncompleted subtasks), scripted suboptimal data collectors, and exact
//! brute-force oracles for grounding the learner.

mod oracle;

pub use oracle::{
    sample_expectile, ExpectileOracle, SmdpQTable, ORACLE_OPTION_BUDGET,
};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{ActionKind, Actions, TrajectoryDataset, Trajectory};
use crate::dataset::{continuous_to_discrete, discrete_to_center};
use crate::error::{Error, Result};

/// Exact small MDP with deterministic transitions. Rewards follow the
/// semi-sparse rule: `R(s, a) = -(uncompleted subtasks at s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `s * n_actions + a -> s'`
    transitions: Vec<usize>,
    /// `s * n_actions + a -> r`
    rewards: Vec<f64>,
    pub initial_state: usize,
    pub horizon: usize,
    /// Completed-subtask count per state.
    completed: Vec<usize>,
    pub n_subtasks: usize,
}

impl TabularMdp {
    pub fn next_state(&self, s: usize, a: usize) -> usize {
        self.transitions[s * self.n_actions + a]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.n_actions + a]
    }

    pub fn completed_subtasks(&self, s: usize) -> usize {
        self.completed[s]
    }

    pub fn uncompleted_subtasks(&self, s: usize) -> usize {
        self.n_subtasks - self.completed[s]
    }

    /// Simulates an option (action sequence) from `s`: returns the
    /// `gamma1`-discounted intra-option return and the end state.
    pub fn simulate_option(&self, s: usize, actions: &[usize], gamma1: f64) -> (f64, usize) {
        let mut state = s;
        let mut acc = 0.0;
        let mut disc = 1.0;
        for &a in actions {
            acc += disc * self.reward(state, a);
            disc *= gamma1;
            state = self.next_state(state, a);
        }
        (acc, state)
    }
}

/// Deterministic chain task: `k` sequential subtasks, each needing
/// `steps_per_subtask` correct actions. The correct action at progress `i`
/// is `i % n_actions`; wrong actions stall. The final state is absorbing
/// with reward 0, so episodes are time-limited rather than terminal.
pub fn chain_env(k_subtasks: usize, steps_per_subtask: usize) -> Result<TabularMdp> {
    chain_env_with(k_subtasks, steps_per_subtask, 3, 10 * k_subtasks * steps_per_subtask)
}

pub fn chain_env_with(
    k_subtasks: usize,
    steps_per_subtask: usize,
    n_actions: usize,
    horizon: usize,
) -> Result<TabularMdp> {
    if k_subtasks == 0 || steps_per_subtask == 0 || n_actions == 0 || horizon == 0 {
        return Err(Error::config("chain env parameters must be positive"));
    }
    let n_states = k_subtasks * steps_per_subtask + 1;
    let mut transitions = vec![0; n_states * n_actions];
    let mut rewards = vec![0.0; n_states * n_actions];
    let mut completed = vec![0; n_states];
    for s in 0..n_states {
        completed[s] = (s / steps_per_subtask).min(k_subtasks);
        let uncompleted = (k_subtasks - completed[s]) as f64;
        for a in 0..n_actions {
            let idx = s * n_actions + a;
            rewards[idx] = -uncompleted;
            transitions[idx] = if s + 1 < n_states && a == s % n_actions {
                s + 1
            } else {
                s
            };
        }
    }
    Ok(TabularMdp {
        n_states,
        n_actions,
        transitions,
        rewards,
        initial_state: 0,
        horizon,
        completed,
        n_subtasks: k_subtasks,
    })
}

/// Environments drivable by continuous `[-1, 1]` actions.
pub trait Environment: Clone + Send {
    fn obs_dim(&self) -> usize;
    fn act_dim(&self) -> usize;
    fn horizon(&self) -> usize;
    fn n_subtasks(&self) -> usize;
    /// Resets to the initial state and returns its observation.
    fn reset(&mut self) -> Vec<f64>;
    /// Applies one primitive action: `(next observation, reward)`.
    fn step(&mut self, action: &[f64]) -> (Vec<f64>, f64);
    /// True once every subtask is complete.
    fn success(&self) -> bool;
}

/// Continuous-facing wrapper around a chain [`TabularMdp`]: observations are
/// one-hot states, the scalar action in `[-1, 1]` is split into
/// `n_actions` equal cells.
#[derive(Debug, Clone)]
pub struct ChainTask {
    pub mdp: TabularMdp,
    state: usize,
}

impl ChainTask {
    pub fn new(mdp: TabularMdp) -> Self {
        let state = mdp.initial_state;
        ChainTask { mdp, state }
    }

    pub fn state(&self) -> usize {
        self.state
    }

    pub fn obs_of(&self, s: usize) -> Vec<f64> {
        let mut obs = vec![0.0; self.mdp.n_states];
        obs[s] = 1.0;
        obs
    }

    /// Decodes a one-hot observation back to the discrete state.
    pub fn state_of_obs(obs: &[f64]) -> usize {
        let mut best = 0;
        for (i, &v) in obs.iter().enumerate() {
            if v > obs[best] {
                best = i;
            }
        }
        best
    }

    pub fn discretize(&self, a: f64) -> usize {
        continuous_to_discrete(a, self.mdp.n_actions)
    }

    pub fn action_center(&self, idx: usize) -> f64 {
        discrete_to_center(idx, self.mdp.n_actions)
    }

    /// The scripted-optimal action at state `s`.
    pub fn optimal_action(&self, s: usize) -> usize {
        s % self.mdp.n_actions
    }
}

impl Environment for ChainTask {
    fn obs_dim(&self) -> usize {
        self.mdp.n_states
    }

    fn act_dim(&self) -> usize {
        1
    }

    fn horizon(&self) -> usize {
        self.mdp.horizon
    }

    fn n_subtasks(&self) -> usize {
        self.mdp.n_subtasks
    }

    fn reset(&mut self) -> Vec<f64> {
        self.state = self.mdp.initial_state;
        self.obs_of(self.state)
    }

    fn step(&mut self, action: &[f64]) -> (Vec<f64>, f64) {
        let a = self.discretize(action[0]);
        let r = self.mdp.reward(self.state, a);
        self.state = self.mdp.next_state(self.state, a);
        (self.obs_of(self.state), r)
    }

    fn success(&self) -> bool {
        self.mdp.uncompleted_subtasks(self.state) == 0
    }
}

/// Continuous analogue of the chain structure: a 2-D point mass visiting an
/// ordered list of waypoints inside `[-1, 1]^2`, same semi-sparse reward.
#[derive(Debug, Clone)]
pub struct PointMassTask {
    pub waypoints: Vec<[f64; 2]>,
    pub radius: f64,
    horizon: usize,
    pos: [f64; 2],
    vel: [f64; 2],
    completed: usize,
}

const PM_DT: f64 = 0.1;
const PM_VMAX: f64 = 0.2;

impl PointMassTask {
    pub fn new(n_waypoints: usize, horizon: usize) -> Result<Self> {
        if n_waypoints == 0 || horizon == 0 {
            return Err(Error::config("point-mass parameters must be positive"));
        }
        // Deterministic zig-zag waypoint layout.
        let waypoints = (0..n_waypoints)
            .map(|i| {
                let frac = (i + 1) as f64 / n_waypoints as f64;
                let x = -0.8 + 1.6 * frac;
                let y = if i % 2 == 0 { 0.6 } else { -0.6 };
                [x, y]
            })
            .collect();
        Ok(PointMassTask {
            waypoints,
            radius: 0.15,
            horizon,
            pos: [-0.9, 0.0],
            vel: [0.0, 0.0],
            completed: 0,
        })
    }

    pub fn position(&self) -> [f64; 2] {
        self.pos
    }

    pub fn velocity(&self) -> [f64; 2] {
        self.vel
    }

    pub fn completed(&self) -> usize {
        self.completed
    }

    fn check_waypoints(&mut self) {
        while self.completed < self.waypoints.len() {
            let wp = self.waypoints[self.completed];
            let dx = self.pos[0] - wp[0];
            let dy = self.pos[1] - wp[1];
            if (dx * dx + dy * dy).sqrt() <= self.radius {
                self.completed += 1;
            } else {
                break;
            }
        }
    }
}

impl Environment for PointMassTask {
    fn obs_dim(&self) -> usize {
        4
    }

    fn act_dim(&self) -> usize {
        2
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn n_subtasks(&self) -> usize {
        self.waypoints.len()
    }

    fn reset(&mut self) -> Vec<f64> {
        self.pos = [-0.9, 0.0];
        self.vel = [0.0, 0.0];
        self.completed = 0;
        self.check_waypoints();
        vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }

    fn step(&mut self, action: &[f64]) -> (Vec<f64>, f64) {
        let r = -((self.waypoints.len() - self.completed) as f64);
        for d in 0..2 {
            let a = action[d].clamp(-1.0, 1.0);
            self.vel[d] = (self.vel[d] + PM_DT * a).clamp(-PM_VMAX, PM_VMAX);
            self.pos[d] = (self.pos[d] + self.vel[d]).clamp(-1.0, 1.0);
        }
        self.check_waypoints();
        (
            vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1]],
            r,
        )
    }

    fn success(&self) -> bool {
        self.completed == self.waypoints.len()
    }
}

/// Anything that emits H-step action chunks from an observation.
pub trait ChunkPolicy {
    /// Returns a flat `h * act_dim` action chunk.
    fn chunk(&self, obs: &[f64], rng: &mut dyn RngCore) -> Vec<f64>;
}

/// Scripted near-optimal chain controller emitting full chunks.
pub struct ScriptedChainPolicy {
    pub task: ChainTask,
    pub h: usize,
}

impl ChunkPolicy for ScriptedChainPolicy {
    fn chunk(&self, obs: &[f64], _rng: &mut dyn RngCore) -> Vec<f64> {
        let mut s = ChainTask::state_of_obs(obs);
        let mut out = Vec::with_capacity(self.h);
        for _ in 0..self.h {
            let a = self.task.optimal_action(s);
            out.push(self.task.action_center(a));
            s = self.task.mdp.next_state(s, a);
        }
        out
    }
}

/// Uniform-random chunk policy, used for baselines.
pub struct RandomChunkPolicy {
    pub h: usize,
    pub act_dim: usize,
}

impl ChunkPolicy for RandomChunkPolicy {
    fn chunk(&self, _obs: &[f64], rng: &mut dyn RngCore) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(rng.next_u64());
        (0..self.h * self.act_dim)
            .map(|_| r.random_range(-1.0..1.0))
            .collect()
    }
}

/// Collects `n_trajectories` full-horizon trajectories from a chain task
/// using the scripted controller corrupted by sticky random noise: with
/// probability `noise` the agent takes a noisy action, which repeats the
/// previous action with probability 0.7 and is uniform otherwise.
pub fn collect_chain_data(
    task: &ChainTask,
    n_trajectories: usize,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TrajectoryDataset> {
    if !(0.0..=1.0).contains(&noise) {
        return Err(Error::config("noise must lie in [0, 1]"));
    }
    let mdp = &task.mdp;
    let mut ds = TrajectoryDataset::new(
        mdp.n_states,
        ActionKind::Discrete {
            n_actions: mdp.n_actions,
        },
    )?;
    for _ in 0..n_trajectories {
        let mut env = task.clone();
        let mut obs = env.reset();
        let mut states = Vec::with_capacity((mdp.horizon + 1) * mdp.n_states);
        let mut actions = Vec::with_capacity(mdp.horizon);
        let mut rewards = Vec::with_capacity(mdp.horizon);
        states.extend_from_slice(&obs);
        let mut prev_action = 0usize;
        for step in 0..mdp.horizon {
            let s = env.state();
            let a = if rng.random_bool(noise) {
                if step > 0 && rng.random_bool(0.7) {
                    prev_action
                } else {
                    rng.random_range(0..mdp.n_actions)
                }
            } else {
                task.optimal_action(s)
            };
            prev_action = a;
            let (next_obs, r) = env.step(&[task.action_center(a)]);
            obs = next_obs;
            states.extend_from_slice(&obs);
            actions.push(a as i64);
            rewards.push(r);
        }
        ds.push(Trajectory {
            states,
            actions: Actions::Discrete(actions),
            rewards,
            terminal: false,
        })?;
    }
    Ok(ds)
}

/// Collects point-mass trajectories from a PD controller toward the current
/// waypoint, corrupted by Ornstein-Uhlenbeck noise scaled by `noise`.
pub fn collect_pointmass_data(
    task: &PointMassTask,
    n_trajectories: usize,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<TrajectoryDataset> {
    if !(0.0..=1.0).contains(&noise) {
        return Err(Error::config("noise must lie in [0, 1]"));
    }
    let mut ds = TrajectoryDataset::new(4, ActionKind::Continuous { act_dim: 2 })?;
    let ou_theta = 0.15;
    let ou_sigma = 0.8 * noise;
    for _ in 0..n_trajectories {
        let mut env = task.clone();
        let mut obs = env.reset();
        let mut states = Vec::new();
        let mut actions = Vec::new();
        let mut rewards = Vec::new();
        states.extend_from_slice(&obs);
        let mut ou = [0.0f64; 2];
        for _ in 0..env.horizon() {
            let target = if env.completed() < env.waypoints.len() {
                env.waypoints[env.completed()]
            } else {
                env.position()
            };
            let mut action = [0.0f64; 2];
            for d in 0..2 {
                ou[d] += ou_theta * (0.0 - ou[d]) + ou_sigma * rng.sample::<f64, _>(rand_distr::StandardNormal);
                let pd = 6.0 * (target[d] - env.position()[d]) - 8.0 * env.velocity()[d];
                action[d] = (pd + ou[d]).clamp(-1.0, 1.0);
            }
            let (next_obs, r) = env.step(&action);
            obs = next_obs;
            states.extend_from_slice(&obs);
            actions.extend_from_slice(&action);
            rewards.push(r);
        }
        ds.push(Trajectory {
            states,
            actions: Actions::Continuous(actions),
            rewards,
            terminal: false,
        })?;
    }
    Ok(ds)
}

/// Evaluation statistics over seeded episodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub mean_return: f64,
    pub success_rate: f64,
    pub episodes: usize,
}

/// Rolls out `episodes` episodes of full-chunk execution: query a chunk,
/// execute all `h` actions, re-query. Success means every subtask is
/// complete by the horizon. Results are deterministic in `seed`; episodes
/// may fan out over `threads`.
pub fn evaluate_policy<E: Environment + Sync, P: ChunkPolicy + Sync>(
    env: &E,
    policy: &P,
    h: usize,
    episodes: usize,
    seed: u64,
    threads: usize,
) -> EvalStats {
    let run_episode = |ep: usize| -> (f64, bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(ep as u64 + 1)));
        let mut env = env.clone();
        let mut obs = env.reset();
        let mut total = 0.0;
        let mut t = 0;
        while t < env.horizon() && !env.success() {
            let chunk = policy.chunk(&obs, &mut rng);
            debug_assert_eq!(chunk.len(), h * env.act_dim());
            for k in 0..h {
                if t >= env.horizon() || env.success() {
                    break;
                }
                let a = &chunk[k * env.act_dim()..(k + 1) * env.act_dim()];
                let (next_obs, r) = env.step(a);
                obs = next_obs;
                total += r;
                t += 1;
            }
        }
        (total, env.success())
    };

    let results: Vec<(f64, bool)> = if threads > 1 && episodes > 1 {
        let mut results = vec![(0.0, false); episodes];
        let chunk_size = episodes.div_ceil(threads);
        std::thread::scope(|scope| {
            for (ci, chunk) in results.chunks_mut(chunk_size).enumerate() {
                let run = &run_episode;
                scope.spawn(move || {
                    for (j, slot) in chunk.iter_mut().enumerate() {
                        *slot = run(ci * chunk_size + j);
                    }
                });
            }
        });
        results
    } else {
        (0..episodes).map(run_episode).collect()
    };

    let mean_return = results.iter().map(|r| r.0).sum::<f64>() / episodes.max(1) as f64;
    let successes = results.iter().filter(|r| r.1).count();
    EvalStats {
        mean_return,
        success_rate: successes as f64 / episodes.max(1) as f64,
        episodes,
    }
}
