//! Trajectory storage, option-transition sampling with intra-option
//! discounted returns, and dataset statistics for support construction.
//!
//! Options are sampled at every start index `t <= T - H`; no option straddles
//! a trajectory boundary and tails shorter than `H` are never padded.
//! Discrete actions are stored as indices and embedded into `[-1, 1]` cell
//! centers when batches are built, so tabular tasks ride the same continuous
//! critic path as everything else.

use std::path::Path;

use rand::Rng;

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};

const MAGIC: &[u8] = b"SQDS";
const FORMAT_VERSION: u32 = 1;

/// How actions are stored in a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionKind {
    Continuous { act_dim: usize },
    Discrete { n_actions: usize },
}

impl ActionKind {
    /// Dimension of one action after embedding (discrete indices map to one
    /// scalar cell center).
    pub fn embedded_dim(&self) -> usize {
        match self {
            ActionKind::Continuous { act_dim } => *act_dim,
            ActionKind::Discrete { .. } => 1,
        }
    }
}

/// Center of cell `idx` when `[-1, 1]` is split into `n` equal cells.
pub fn discrete_to_center(idx: usize, n: usize) -> f64 {
    debug_assert!(idx < n);
    -1.0 + (2 * idx + 1) as f64 / n as f64
}

/// Inverse of [`discrete_to_center`]'s cell structure: the cell containing a
/// continuous value in `[-1, 1]`.
pub fn continuous_to_discrete(a: f64, n: usize) -> usize {
    let cell = ((a + 1.0) * 0.5 * n as f64).floor() as i64;
    cell.clamp(0, n as i64 - 1) as usize
}

/// Per-trajectory action storage.
#[derive(Debug, Clone, PartialEq)]
pub enum Actions {
    Continuous(Vec<f64>),
    Discrete(Vec<i64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `(T+1) * obs_dim`, row-major.
    pub states: Vec<f64>,
    pub actions: Actions,
    /// `T` rewards.
    pub rewards: Vec<f64>,
    /// True when the episode ended in an environment-terminal state rather
    /// than a timeout; controls bootstrap masking.
    pub terminal: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    obs_dim: usize,
    kind: ActionKind,
    trajectories: Vec<Trajectory>,
}

/// A batch of SMDP option transitions:
/// `(s_t, H-step option, intra return, s_{t+H}, bootstrap mask)`.
#[derive(Debug, Clone)]
pub struct OptionBatch {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub h: usize,
    /// `B * obs_dim`
    pub states: Vec<f64>,
    /// `B * H * act_dim`, embedded/continuous.
    pub options: Vec<f64>,
    /// `B`
    pub intra_returns: Vec<f64>,
    /// `B * obs_dim`
    pub next_states: Vec<f64>,
    /// `B`; 0 only where `t + H` hits an environment-terminal end.
    pub masks: Vec<f64>,
    /// `(trajectory index, start step)` provenance for each sample.
    pub origins: Vec<(u32, u32)>,
}

impl OptionBatch {
    pub fn len(&self) -> usize {
        self.intra_returns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intra_returns.is_empty()
    }

    pub fn state(&self, b: usize) -> &[f64] {
        &self.states[b * self.obs_dim..(b + 1) * self.obs_dim]
    }

    pub fn option(&self, b: usize) -> &[f64] {
        let w = self.h * self.act_dim;
        &self.options[b * w..(b + 1) * w]
    }

    pub fn next_state(&self, b: usize) -> &[f64] {
        &self.next_states[b * self.obs_dim..(b + 1) * self.obs_dim]
    }
}

/// Reward range and discounted returns-to-go used by support construction.
#[derive(Debug, Clone)]
pub struct ReturnStatistics {
    pub r_min: f64,
    pub r_max: f64,
    /// Dual-discount returns-to-go for every valid option start.
    pub returns_to_go: Vec<f64>,
}

impl TrajectoryDataset {
    pub fn new(obs_dim: usize, kind: ActionKind) -> Result<Self> {
        if obs_dim == 0 {
            return Err(Error::config("obs_dim must be positive"));
        }
        match kind {
            ActionKind::Continuous { act_dim } if act_dim == 0 => {
                return Err(Error::config("act_dim must be positive"))
            }
            ActionKind::Discrete { n_actions } if n_actions == 0 => {
                return Err(Error::config("n_actions must be positive"))
            }
            _ => {}
        }
        Ok(TrajectoryDataset {
            obs_dim,
            kind,
            trajectories: Vec::new(),
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn action_kind(&self) -> ActionKind {
        self.kind
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn num_trajectories(&self) -> usize {
        self.trajectories.len()
    }

    pub fn num_steps(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }

    pub fn min_trajectory_len(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).min().unwrap_or(0)
    }

    /// Appends a trajectory after validating shapes and finiteness.
    pub fn push(&mut self, traj: Trajectory) -> Result<()> {
        let t = traj.len();
        if t == 0 {
            return Err(Error::config("empty trajectory"));
        }
        if traj.states.len() != (t + 1) * self.obs_dim {
            return Err(Error::Shape {
                context: "trajectory states",
                expected: (t + 1) * self.obs_dim,
                got: traj.states.len(),
            });
        }
        match (&traj.actions, self.kind) {
            (Actions::Continuous(a), ActionKind::Continuous { act_dim }) => {
                if a.len() != t * act_dim {
                    return Err(Error::Shape {
                        context: "trajectory actions",
                        expected: t * act_dim,
                        got: a.len(),
                    });
                }
                if a.iter().any(|v| !v.is_finite()) {
                    return Err(Error::config("non-finite action value"));
                }
            }
            (Actions::Discrete(a), ActionKind::Discrete { n_actions }) => {
                if a.len() != t {
                    return Err(Error::Shape {
                        context: "trajectory actions",
                        expected: t,
                        got: a.len(),
                    });
                }
                if a.iter().any(|&v| v < 0 || v as usize >= n_actions) {
                    return Err(Error::config("discrete action out of range"));
                }
            }
            _ => return Err(Error::config("trajectory action kind does not match dataset")),
        }
        if traj.states.iter().any(|v| !v.is_finite())
            || traj.rewards.iter().any(|v| !v.is_finite())
        {
            return Err(Error::config("non-finite state or reward value"));
        }
        self.trajectories.push(traj);
        Ok(())
    }

    /// State at step `t` of trajectory `i`.
    pub fn state(&self, i: usize, t: usize) -> &[f64] {
        let traj = &self.trajectories[i];
        &traj.states[t * self.obs_dim..(t + 1) * self.obs_dim]
    }

    /// Writes the embedded continuous form of action `(i, t)` into `out`.
    pub fn embed_action(&self, i: usize, t: usize, out: &mut [f64]) {
        match (&self.trajectories[i].actions, self.kind) {
            (Actions::Continuous(a), ActionKind::Continuous { act_dim }) => {
                out.copy_from_slice(&a[t * act_dim..(t + 1) * act_dim]);
            }
            (Actions::Discrete(a), ActionKind::Discrete { n_actions }) => {
                out[0] = discrete_to_center(a[t] as usize, n_actions);
            }
            _ => unreachable!("kind validated at push"),
        }
    }

    /// Discrete action index at `(i, t)`; only valid for discrete datasets.
    pub fn discrete_action(&self, i: usize, t: usize) -> Option<usize> {
        match &self.trajectories[i].actions {
            Actions::Discrete(a) => Some(a[t] as usize),
            Actions::Continuous(_) => None,
        }
    }

    /// Discounted intra-option return over `rewards` with discount `gamma1`.
    pub fn intra_return(rewards: &[f64], gamma1: f64) -> f64 {
        let mut acc = 0.0;
        let mut disc = 1.0;
        for &r in rewards {
            acc += disc * r;
            disc *= gamma1;
        }
        acc
    }

    /// Samples `batch` option transitions of length `h`. Start indices are
    /// uniform over every valid `(trajectory, t <= T - H)` position; the
    /// bootstrap mask is 0 only when the option ends exactly at an
    /// environment-terminal trajectory end.
    pub fn sample_option_batch<R: Rng + ?Sized>(
        &self,
        h: usize,
        gamma1: f64,
        batch: usize,
        rng: &mut R,
    ) -> Result<OptionBatch> {
        if h == 0 {
            return Err(Error::config("option length must be at least 1"));
        }
        if self.trajectories.is_empty() {
            return Err(Error::config("cannot sample from an empty dataset"));
        }
        if self.min_trajectory_len() < h {
            return Err(Error::config(format!(
                "option length {h} exceeds shortest trajectory length {}",
                self.min_trajectory_len()
            )));
        }

        // Cumulative valid-position counts for a single uniform draw over
        // all (trajectory, t) pairs.
        let mut cum = Vec::with_capacity(self.trajectories.len());
        let mut total = 0u64;
        for traj in &self.trajectories {
            total += (traj.len() - h + 1) as u64;
            cum.push(total);
        }

        let act_dim = self.kind.embedded_dim();
        let mut out = OptionBatch {
            obs_dim: self.obs_dim,
            act_dim,
            h,
            states: Vec::with_capacity(batch * self.obs_dim),
            options: Vec::with_capacity(batch * h * act_dim),
            intra_returns: Vec::with_capacity(batch),
            next_states: Vec::with_capacity(batch),
            masks: Vec::with_capacity(batch),
            origins: Vec::with_capacity(batch),
        };
        let mut act_buf = vec![0.0; act_dim];
        for _ in 0..batch {
            let flat = rng.random_range(0..total);
            let ti = cum.partition_point(|&c| c <= flat);
            let prev = if ti == 0 { 0 } else { cum[ti - 1] };
            let t = (flat - prev) as usize;
            self.fill_sample(ti, t, h, gamma1, &mut out, &mut act_buf);
        }
        Ok(out)
    }

    /// Builds the batch entry for option start `(ti, t)`.
    fn fill_sample(
        &self,
        ti: usize,
        t: usize,
        h: usize,
        gamma1: f64,
        out: &mut OptionBatch,
        act_buf: &mut [f64],
    ) {
        let traj = &self.trajectories[ti];
        out.states.extend_from_slice(self.state(ti, t));
        for k in 0..h {
            self.embed_action(ti, t + k, act_buf);
            out.options.extend_from_slice(act_buf);
        }
        out.intra_returns
            .push(Self::intra_return(&traj.rewards[t..t + h], gamma1));
        out.next_states.extend_from_slice(self.state(ti, t + h));
        let terminal_end = traj.terminal && t + h == traj.len();
        out.masks.push(if terminal_end { 0.0 } else { 1.0 });
        out.origins.push((ti as u32, t as u32));
    }

    /// Deterministic batch over every valid option start, in order. Used by
    /// oracle comparisons and fixed-batch training tests.
    pub fn all_option_starts(&self, h: usize, gamma1: f64) -> Result<OptionBatch> {
        if self.min_trajectory_len() < h || self.trajectories.is_empty() {
            return Err(Error::config("option length exceeds shortest trajectory"));
        }
        let act_dim = self.kind.embedded_dim();
        let mut out = OptionBatch {
            obs_dim: self.obs_dim,
            act_dim,
            h,
            states: Vec::new(),
            options: Vec::new(),
            intra_returns: Vec::new(),
            next_states: Vec::new(),
            masks: Vec::new(),
            origins: Vec::new(),
        };
        let mut act_buf = vec![0.0; act_dim];
        for ti in 0..self.trajectories.len() {
            for t in 0..=(self.trajectories[ti].len() - h) {
                self.fill_sample(ti, t, h, gamma1, &mut out, &mut act_buf);
            }
        }
        Ok(out)
    }

    /// Reward range plus dual-discount returns-to-go for every valid option
    /// start: `G_t = R̂_{t:t+H-1} + gamma2^H * G_{t+H}`, with chains ending
    /// where no complete option remains.
    pub fn return_statistics(&self, gamma1: f64, gamma2: f64, h: usize) -> Result<ReturnStatistics> {
        if self.trajectories.is_empty() {
            return Err(Error::config("empty dataset has no statistics"));
        }
        if h == 0 || self.min_trajectory_len() < h {
            return Err(Error::config("option length exceeds shortest trajectory"));
        }
        let mut r_min = f64::INFINITY;
        let mut r_max = f64::NEG_INFINITY;
        let boot = gamma2.powi(h as i32);
        let mut returns = Vec::new();
        for traj in &self.trajectories {
            for &r in &traj.rewards {
                r_min = r_min.min(r);
                r_max = r_max.max(r);
            }
            let t_len = traj.len();
            let starts = t_len - h + 1;
            let mut g = vec![0.0; starts];
            for t in (0..starts).rev() {
                let tail = if t + h < starts { g[t + h] } else { 0.0 };
                g[t] = Self::intra_return(&traj.rewards[t..t + h], gamma1) + boot * tail;
            }
            returns.extend_from_slice(&g);
        }
        Ok(ReturnStatistics {
            r_min,
            r_max,
            returns_to_go: returns,
        })
    }

    /// Serializes to the dataset file format. Raw f64 bits; save -> load ->
    /// save reproduces the bytes exactly.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.put_bytes(MAGIC);
        w.put_u32(FORMAT_VERSION);
        match self.kind {
            ActionKind::Continuous { act_dim } => {
                w.put_u8(0);
                w.put_u32(act_dim as u32);
            }
            ActionKind::Discrete { n_actions } => {
                w.put_u8(1);
                w.put_u32(n_actions as u32);
            }
        }
        w.put_u32(self.obs_dim as u32);
        w.put_u64(self.trajectories.len() as u64);
        for traj in &self.trajectories {
            w.put_u64(traj.len() as u64);
            w.put_u8(traj.terminal as u8);
            w.put_f64_slice(&traj.states);
            match &traj.actions {
                Actions::Continuous(a) => w.put_f64_slice(a),
                Actions::Discrete(a) => w.put_i64_slice(a),
            }
            w.put_f64_slice(&traj.rewards);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic(MAGIC)?;
        let version = r.get_u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::format(format!("unsupported dataset version {version}")));
        }
        let kind_tag = r.get_u8()?;
        let kind_param = r.get_u32()? as usize;
        let kind = match kind_tag {
            0 => ActionKind::Continuous { act_dim: kind_param },
            1 => ActionKind::Discrete { n_actions: kind_param },
            k => return Err(Error::format(format!("unknown action kind {k}"))),
        };
        let obs_dim = r.get_u32()? as usize;
        let n_traj = r.get_u64()? as usize;
        let mut ds = TrajectoryDataset::new(obs_dim, kind)?;
        for _ in 0..n_traj {
            let t_len = r.get_len("trajectory length")?;
            let terminal = r.get_u8()? != 0;
            let states = r.get_f64_vec()?;
            let actions = match kind {
                ActionKind::Continuous { .. } => Actions::Continuous(r.get_f64_vec()?),
                ActionKind::Discrete { .. } => Actions::Discrete(r.get_i64_vec()?),
            };
            let rewards = r.get_f64_vec()?;
            if rewards.len() != t_len {
                return Err(Error::format("reward array does not match trajectory length"));
            }
            ds.push(Trajectory {
                states,
                actions,
                rewards,
                terminal,
            })?;
        }
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}
