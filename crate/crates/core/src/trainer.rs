//! Episode collection, greedy evaluation and the training loop.

use crate::agent_net::select_action;
use crate::checkpoint;
use crate::config::TrainConfig;
use crate::env::{EnvConfig, RoleArena};
use crate::episode::{Batch, EpisodeRecord, ReplayBuffer};
use crate::error::{Error, Result};
use crate::learner::{Learner, Networks};
use crate::params::ParamStore;
use crate::tensor::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const METRICS_SCHEMA: &str = "acorm-metrics";
pub const METRICS_VERSION: u32 = 1;

/// Rolls out one episode with ε-greedy decentralized execution. Exploration
/// draws come from a generator seeded with `episode_seed`, so identical
/// arguments give identical records.
pub fn collect_episode(
    nets: &Networks,
    store: &ParamStore,
    env_config: &EnvConfig,
    epsilon: f64,
    episode_seed: u64,
) -> Result<EpisodeRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed);
    let (mut env, first) = RoleArena::reset(env_config, episode_seed)?;
    let n = env_config.n_agents();
    let n_actions = env_config.n_actions();
    let obs_dim = env_config.obs_dim();
    let mut record = EpisodeRecord::start(&first, n_actions, episode_seed);
    let mut hidden = Mat::zeros(n, nets.agent.embedding_dim);
    let mut last: Vec<Option<usize>> = vec![None; n];
    let mut current = first;
    loop {
        let mut inputs = Mat::zeros(n, obs_dim + n_actions);
        for (i, prev) in last.iter().enumerate() {
            let row = inputs.row_mut(i);
            row[..obs_dim].copy_from_slice(&current.observations[i]);
            if let Some(a) = *prev {
                row[obs_dim + a] = 1.0;
            }
        }
        let (h, q) = nets.agent.step_batch(store, &inputs, &hidden);
        hidden = h;
        let mut joint = Vec::with_capacity(n);
        for i in 0..n {
            joint.push(select_action(
                q.row(i),
                &current.available_actions[i],
                epsilon,
                &mut rng,
            )?);
        }
        let result = env.step(&joint)?;
        record.push(&joint, &result);
        for (l, &a) in last.iter_mut().zip(&joint) {
            *l = Some(a);
        }
        if result.terminated {
            return Ok(record);
        }
        current = result;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub win_rate: f64,
    pub mean_return: f64,
}

/// Greedy rollouts on `episodes` environments seeded `seed, seed+1, …`.
pub fn evaluate(
    nets: &Networks,
    store: &ParamStore,
    env_config: &EnvConfig,
    episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one episode".into()));
    }
    let mut wins = 0;
    let mut total = 0.0;
    for e in 0..episodes {
        let rec = collect_episode(nets, store, env_config, 0.0, seed.wrapping_add(e as u64))?;
        wins += rec.won as usize;
        total += rec.episode_return();
    }
    Ok(EvalReport {
        episodes,
        win_rate: wins as f64 / episodes as f64,
        mean_return: total / episodes as f64,
    })
}

/// Line-delimited JSON metrics: one header object, then records of
/// `{step, metric, value, seed}`.
pub struct MetricsLog<W: Write> {
    out: W,
    seed: u64,
}

impl<W: Write> MetricsLog<W> {
    pub fn new(mut out: W, config: &TrainConfig) -> Result<Self> {
        let header = json!({
            "schema": METRICS_SCHEMA,
            "version": METRICS_VERSION,
            "seed": config.seed,
            "variant": config.variant().map(|v| v.name()),
        });
        writeln!(out, "{header}").map_err(|e| Error::io("metrics", e))?;
        Ok(Self { out, seed: config.seed })
    }

    pub fn record(&mut self, step: u64, metric: &str, value: impl Into<Value>) -> Result<()> {
        let line = json!({"step": step, "metric": metric, "value": value.into(), "seed": self.seed});
        writeln!(self.out, "{line}").map_err(|e| Error::io("metrics", e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io("metrics", e))
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub env_steps: u64,
    pub episodes: u64,
    pub td_updates: u64,
    pub contrastive_updates: u64,
    /// `(env step, report)` for every evaluation.
    pub evaluations: Vec<(u64, EvalReport)>,
}

impl TrainSummary {
    pub fn final_win_rate(&self) -> Option<f64> {
        self.evaluations.last().map(|(_, r)| r.win_rate)
    }
}

/// Mutable training state: learner, replay, sampling generator, counters.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub learner: Learner,
    pub buffer: ReplayBuffer,
    pub rng: ChaCha8Rng,
    pub env_steps: u64,
    pub episodes: u64,
    pub evaluations: Vec<(u64, EvalReport)>,
}

const SAMPLER_STREAM: u64 = 0x5eed;

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let buffer = ReplayBuffer::new(config.buffer_capacity);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(SAMPLER_STREAM);
        Ok(Self {
            learner: Learner::new(config)?,
            buffer,
            rng,
            env_steps: 0,
            episodes: 0,
            evaluations: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.learner.config
    }

    fn eval_seed(&self) -> u64 {
        let c = self.config();
        1_000_000 + self.evaluations.len() as u64 * c.evaluate_episodes as u64
    }

    fn next_eval_at(&self) -> u64 {
        (self.evaluations.len() as u64 + 1) * self.config().evaluate_interval
    }

    pub fn evaluate_now(&self) -> Result<EvalReport> {
        let c = self.config();
        evaluate(
            &self.learner.nets,
            &self.learner.params,
            &c.env,
            c.evaluate_episodes,
            self.eval_seed(),
        )
    }

    /// Collects one episode, stores it and performs the updates it unlocks.
    pub fn step_episode<W: Write>(&mut self, log: &mut MetricsLog<W>) -> Result<()> {
        let config = self.learner.config.clone();
        let epsilon = config.epsilon_at(self.env_steps);
        let episode_seed = self.rng.random::<u64>();
        let record = collect_episode(
            &self.learner.nets,
            &self.learner.params,
            &config.env,
            epsilon,
            episode_seed,
        )?;
        self.env_steps += record.len() as u64;
        self.episodes += 1;
        log.record(self.env_steps, "episode_return", record.episode_return())?;
        log.record(self.env_steps, "epsilon", epsilon)?;
        self.buffer.push(record);

        if self.buffer.len() >= config.batch_size {
            let batch = {
                let sample = self.buffer.sample(config.batch_size, &mut self.rng)?;
                Batch::new(&sample)?
            };
            let lr_scale = config.lr_scale_at(self.env_steps);
            let td = self.learner.td_update(&batch, lr_scale)?;
            log.record(self.env_steps, "td_loss", td.loss)?;
            if config.use_contrastive && self.learner.td_updates.is_multiple_of(config.contrastive_interval) {
                let cl = self.learner.contrastive_update(&batch, lr_scale, None)?;
                log.record(self.env_steps, "contrastive_loss", cl.loss)?;
                log.record(self.env_steps, "centroid_distance", cl.mean_centroid_distance)?;
                log.record(self.env_steps, "cluster_labels", json!(cl.labels[0]))?;
            }
        }
        Ok(())
    }

    fn run_evaluation<W: Write>(&mut self, log: &mut MetricsLog<W>, checkpoint_dir: Option<&Path>) -> Result<()> {
        let report = self.evaluate_now()?;
        log.record(self.env_steps, "test_win_rate", report.win_rate)?;
        log.record(self.env_steps, "test_return", report.mean_return)?;
        self.evaluations.push((self.env_steps, report));
        if let Some(dir) = checkpoint_dir {
            checkpoint::save(&dir.join(LATEST_CHECKPOINT), self, false)?;
        }
        Ok(())
    }

    /// Trains until `total_env_steps`, evaluating every `evaluate_interval`
    /// environment steps and once at the end. Checkpoints go to
    /// `checkpoint_dir` when given.
    pub fn run<W: Write>(&mut self, log: &mut MetricsLog<W>, checkpoint_dir: Option<&Path>) -> Result<TrainSummary> {
        let total = self.config().total_env_steps;
        while self.env_steps < total {
            if let Err(e) = self.step_episode(log) {
                if let (Error::NonFiniteLoss { .. }, Some(dir)) = (&e, checkpoint_dir) {
                    checkpoint::save(&dir.join(DIAGNOSTIC_CHECKPOINT), self, false)?;
                }
                log.flush()?;
                return Err(e);
            }
            while self.env_steps >= self.next_eval_at() {
                self.run_evaluation(log, checkpoint_dir)?;
            }
        }
        if total > 0 && self.evaluations.last().is_none_or(|(s, _)| *s != self.env_steps) {
            self.run_evaluation(log, checkpoint_dir)?;
        }
        log.flush()?;
        Ok(self.summary())
    }

    pub fn summary(&self) -> TrainSummary {
        TrainSummary {
            env_steps: self.env_steps,
            episodes: self.episodes,
            td_updates: self.learner.td_updates,
            contrastive_updates: self.learner.contrastive_updates,
            evaluations: self.evaluations.clone(),
        }
    }
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LATEST_CHECKPOINT: &str = "checkpoint.ckpt";
pub const DIAGNOSTIC_CHECKPOINT: &str = "diagnostic.ckpt";

/// Runs a full training job. With `output_dir`, metrics go to
/// `metrics.jsonl` and checkpoints next to it.
pub fn train(config: TrainConfig, output_dir: Option<&Path>) -> Result<(Trainer, TrainSummary)> {
    let mut trainer = Trainer::new(config)?;
    let summary = match output_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path: PathBuf = dir.join(METRICS_FILE);
            let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut log = MetricsLog::new(std::io::BufWriter::new(file), trainer.config())?;
            let ckpt_dir = trainer.config().save_checkpoints.then_some(dir);
            trainer.run(&mut log, ckpt_dir)?
        }
        None => {
            let mut log = MetricsLog::new(std::io::sink(), trainer.config())?;
            trainer.run(&mut log, None)?
        }
    };
    Ok((trainer, summary))
}
