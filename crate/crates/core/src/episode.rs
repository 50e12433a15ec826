//! Episode records, the replay buffer and padded training batches.

use crate::env::{StepResult, STAY};
use crate::error::{Error, Result};
use crate::tensor::Mat;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// One complete episode. Per-step arrays hold `len + 1` entries (the final
/// entry is the observation after the last transition); per-transition
/// arrays hold `len`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub n_actions: usize,
    /// `(len+1) · n · obs_dim`
    pub observations: Vec<f64>,
    /// `(len+1) · state_dim`
    pub states: Vec<f64>,
    /// `(len+1) · n · n_actions`
    pub available: Vec<bool>,
    /// `len · n`
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub terminated: bool,
    pub truncated: bool,
    pub won: bool,
    pub episode_seed: u64,
}

impl EpisodeRecord {
    /// Starts a record from the reset result.
    pub fn start(first: &StepResult, n_actions: usize, episode_seed: u64) -> Self {
        let n_agents = first.observations.len();
        let mut rec = Self {
            n_agents,
            obs_dim: first.observations.first().map_or(0, Vec::len),
            state_dim: first.state.len(),
            n_actions,
            observations: Vec::new(),
            states: Vec::new(),
            available: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            terminated: false,
            truncated: false,
            won: false,
            episode_seed,
        };
        rec.push_frame(first);
        rec
    }

    fn push_frame(&mut self, r: &StepResult) {
        for o in &r.observations {
            self.observations.extend_from_slice(o);
        }
        self.states.extend_from_slice(&r.state);
        for a in &r.available_actions {
            self.available.extend_from_slice(a);
        }
    }

    /// Appends the transition taken with `joint_action` that produced `r`.
    pub fn push(&mut self, joint_action: &[usize], r: &StepResult) {
        self.actions.extend_from_slice(joint_action);
        self.rewards.push(r.reward);
        self.terminated = r.terminated;
        self.truncated = r.truncated;
        self.won = r.won;
        self.push_frame(r);
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn episode_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn observation(&self, t: usize, agent: usize) -> &[f64] {
        let start = (t * self.n_agents + agent) * self.obs_dim;
        &self.observations[start..start + self.obs_dim]
    }

    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t * self.state_dim..(t + 1) * self.state_dim]
    }

    pub fn available_actions(&self, t: usize, agent: usize) -> &[bool] {
        let start = (t * self.n_agents + agent) * self.n_actions;
        &self.available[start..start + self.n_actions]
    }

    pub fn action(&self, t: usize, agent: usize) -> usize {
        self.actions[t * self.n_agents + agent]
    }

    /// Action taken at `t − 1`, or `None` at the first step.
    pub fn last_action(&self, t: usize, agent: usize) -> Option<usize> {
        t.checked_sub(1).map(|p| self.action(p, agent))
    }

    /// True for the final transition of an episode that ended by win or
    /// loss. Time-limit endings still bootstrap.
    pub fn is_terminal(&self, t: usize) -> bool {
        self.terminated && !self.truncated && t + 1 == self.len()
    }
}

/// FIFO store of whole episodes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<EpisodeRecord>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            episodes: VecDeque::with_capacity(capacity.min(1024)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Inserts an episode, evicting the oldest when full.
    pub fn push(&mut self, episode: EpisodeRecord) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
    }

    pub fn iter(&self) -> impl Iterator<Item = &EpisodeRecord> {
        self.episodes.iter()
    }

    /// `batch_size` distinct episodes chosen uniformly.
    pub fn sample<R: Rng>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<&EpisodeRecord>> {
        if batch_size == 0 {
            return Err(Error::EmptyBatch);
        }
        if batch_size > self.episodes.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot sample {batch_size} episodes from a buffer of {}",
                self.episodes.len()
            )));
        }
        Ok(index::sample(rng, self.episodes.len(), batch_size)
            .into_iter()
            .map(|i| &self.episodes[i])
            .collect())
    }
}

/// Episodes padded to a common length and laid out time-major: row
/// `t·B·n + b·n + i` is agent `i` of episode `b` at step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch_size: usize,
    pub n_agents: usize,
    pub n_actions: usize,
    /// Transitions per episode after padding.
    pub steps: usize,
    pub lengths: Vec<usize>,
    /// `(steps+1)·B·n × (obs_dim + n_actions)`: observation and one-hot of
    /// the previous action.
    pub inputs: Mat,
    /// `(steps+1)·B × state_dim`
    pub states: Mat,
    /// `(steps+1)·B·n × n_actions`
    pub available: Vec<bool>,
    /// `steps·B·n`
    pub actions: Vec<usize>,
    /// `steps·B`
    pub rewards: Vec<f64>,
    /// `steps·B`; 1 where the transition ends the episode without bootstrap.
    pub terminal: Vec<f64>,
    /// `steps·B`; 1 for real transitions, 0 for padding.
    pub mask: Vec<f64>,
}

impl Batch {
    /// Pads every episode to the longest one.
    pub fn new(episodes: &[&EpisodeRecord]) -> Result<Self> {
        Self::padded(episodes, 0)
    }

    /// Pads every episode to at least `min_steps` transitions. Padded steps
    /// carry zero inputs, the STAY action, STAY-only availability, zero
    /// reward and zero mask.
    pub fn padded(episodes: &[&EpisodeRecord], min_steps: usize) -> Result<Self> {
        let first = episodes.first().ok_or(Error::EmptyBatch)?;
        let (n, obs_dim, state_dim, n_actions) = (first.n_agents, first.obs_dim, first.state_dim, first.n_actions);
        for ep in episodes {
            if (ep.n_agents, ep.obs_dim, ep.state_dim, ep.n_actions) != (n, obs_dim, state_dim, n_actions) {
                return Err(Error::InvalidArgument(
                    "episodes in a batch must share dimensions".into(),
                ));
            }
            if ep.is_empty() {
                return Err(Error::InvalidArgument("episode without transitions".into()));
            }
        }
        let b = episodes.len();
        let steps = episodes.iter().map(|e| e.len()).max().unwrap_or(0).max(min_steps);
        let input_dim = obs_dim + n_actions;
        let mut inputs = Mat::zeros((steps + 1) * b * n, input_dim);
        let mut states = Mat::zeros((steps + 1) * b, state_dim);
        let mut available = vec![false; (steps + 1) * b * n * n_actions];
        let mut actions = vec![STAY; steps * b * n];
        let mut rewards = vec![0.0; steps * b];
        let mut terminal = vec![0.0; steps * b];
        let mut mask = vec![0.0; steps * b];

        for t in 0..=steps {
            for (bi, ep) in episodes.iter().enumerate() {
                let real = t <= ep.len();
                if real {
                    states.row_mut(t * b + bi).copy_from_slice(ep.state(t));
                }
                for i in 0..n {
                    let row = (t * b + bi) * n + i;
                    let avail = &mut available[row * n_actions..(row + 1) * n_actions];
                    if real {
                        let r = inputs.row_mut(row);
                        r[..obs_dim].copy_from_slice(ep.observation(t, i));
                        if let Some(a) = ep.last_action(t, i) {
                            r[obs_dim + a] = 1.0;
                        }
                        avail.copy_from_slice(ep.available_actions(t, i));
                    } else {
                        avail[STAY] = true;
                    }
                    if t < ep.len() {
                        actions[row] = ep.action(t, i);
                    }
                }
                if t < ep.len() {
                    rewards[t * b + bi] = ep.rewards[t];
                    terminal[t * b + bi] = if ep.is_terminal(t) { 1.0 } else { 0.0 };
                    mask[t * b + bi] = 1.0;
                }
            }
        }
        Ok(Self {
            batch_size: b,
            n_agents: n,
            n_actions,
            steps,
            lengths: episodes.iter().map(|e| e.len()).collect(),
            inputs,
            states,
            available,
            actions,
            rewards,
            terminal,
            mask,
        })
    }

    /// Number of unpadded transitions.
    pub fn valid_transitions(&self) -> usize {
        self.lengths.iter().sum()
    }
}
