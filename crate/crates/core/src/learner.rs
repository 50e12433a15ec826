//! All trainable networks plus the TD and contrastive update rules.

use crate::agent_net::AgentNet;
use crate::attention::MultiHeadAttention;
use crate::config::{TargetUpdateMode, TrainConfig};
use crate::contrastive::{infonce_graph, RoleEncoders};
use crate::episode::Batch;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kmeans::{canonicalize, kmeans};
use crate::mixer::Mixer;
use crate::nn::{Adam, Gru};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Every module of the model. Parameter values live in a [`ParamStore`];
/// these structs only hold ids and shapes, so the same `Networks` serves
/// the online store and its target copy.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Networks {
    pub agent: AgentNet,
    pub roles: RoleEncoders,
    pub state_encoder: Gru,
    pub attention: MultiHeadAttention,
    pub mixer: Mixer,
    pub n_agents: usize,
    pub use_attention: bool,
    pub use_state_encoding: bool,
}

impl Networks {
    /// Builds all modules. Role encoders, state encoder and attention are
    /// created in every variant so stores share one layout; the mixer's
    /// conditioning width follows the ablation switches.
    pub fn new(config: &TrainConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let env = &config.env;
        let net = &config.net;
        let n = env.n_agents();
        let agent = AgentNet::new(store, env.obs_dim(), env.n_actions(), net.agent_embedding_dim, rng);
        let roles = RoleEncoders::new(store, net.agent_embedding_dim, net.role_dim, rng);
        let state_encoder = Gru::new(store, "state_encoder", env.state_dim(), net.state_embedding_dim, rng);
        let attention = MultiHeadAttention::new(
            store,
            net.state_embedding_dim,
            net.role_dim,
            net.attention_heads,
            net.head_dim(),
            net.attention_output_dim,
            rng,
        );
        let cond_dim = match (config.use_state_encoding, config.use_attention) {
            (true, true) => net.attention_output_dim + net.state_embedding_dim,
            (true, false) => net.state_embedding_dim,
            (false, _) => env.state_dim(),
        };
        let mixer = Mixer::new(store, n, cond_dim, net.hypernet_hidden_dim, net.mixing_hidden_dim, rng);
        Self {
            agent,
            roles,
            state_encoder,
            attention,
            mixer,
            n_agents: n,
            use_attention: config.use_attention,
            use_state_encoding: config.use_state_encoding,
        }
    }

    /// Parameters reached by the TD loss.
    pub fn td_params(&self) -> Vec<ParamId> {
        let mut p = self.agent.params();
        if self.use_state_encoding {
            p.extend(self.state_encoder.params());
        }
        if self.use_attention {
            p.extend(self.roles.query.params());
            p.extend(self.attention.params());
        }
        p.extend(self.mixer.params());
        p
    }

    /// Parameters trained by the contrastive loss: query encoder, `W` and
    /// the trajectory encoder.
    pub fn contrastive_params(&self) -> Vec<ParamId> {
        let mut p = self.roles.trainable_params();
        p.extend(self.agent.params());
        p
    }

    /// Mixer conditioning for `steps·b` state rows, with `emb` holding the
    /// matching `steps·b·n` agent embeddings. Also returns the per-head
    /// attention weights when attention is on.
    pub fn conditioning(
        &self,
        g: &mut Graph,
        states: Var,
        emb: Var,
        steps: usize,
        b: usize,
    ) -> Result<(Var, Option<Vec<Var>>)> {
        if !self.use_state_encoding {
            return Ok((states, None));
        }
        let tau = self.state_encoder.unroll(g, states, steps, b);
        if !self.use_attention {
            return Ok((tau, None));
        }
        let z = self.roles.forward_query(g, emb);
        let (tau_mha, weights) = self.attention.forward(g, tau, z, self.n_agents)?;
        Ok((g.concat_cols(&[tau_mha, tau]), Some(weights)))
    }
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct TdStats {
    pub loss: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveStats {
    /// Loss before the optimizer step.
    pub loss: f64,
    /// Canonical cluster labels per sampled `(episode, timestep)` group.
    pub labels: Vec<Vec<usize>>,
    /// `(episode index in batch, timestep)` per group.
    pub groups: Vec<(usize, usize)>,
    /// Mean distance from an embedding to its cluster centroid.
    pub mean_centroid_distance: f64,
}

/// Online and target parameters with their optimizers.
#[derive(Clone, Debug)]
pub struct Learner {
    pub config: TrainConfig,
    pub nets: Networks,
    pub params: ParamStore,
    pub target: ParamStore,
    pub td_optimizer: Adam,
    pub contrastive_optimizer: Adam,
    pub td_updates: u64,
    pub contrastive_updates: u64,
}

fn rows_prefix(m: &Mat, rows: usize) -> Mat {
    Mat::from_vec(rows, m.cols(), m.data()[..rows * m.cols()].to_vec())
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Up to `count` uniformly spaced decision steps of an episode with `len`
/// transitions: `t_k = ⌊k·(len−1)/(count−1)⌋`.
pub fn spaced_timesteps(len: usize, count: usize) -> Vec<usize> {
    let s = count.min(len);
    match s {
        0 => Vec::new(),
        1 => vec![0],
        _ => (0..s).map(|k| k * (len - 1) / (s - 1)).collect(),
    }
}

impl Learner {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let nets = Networks::new(&config, &mut params, &mut rng);
        let target = params.clone();
        let td_optimizer = Adam::new(&params, nets.td_params(), config.adam.clone());
        let contrastive_optimizer = Adam::new(&params, nets.contrastive_params(), config.adam.clone());
        Ok(Self {
            config,
            nets,
            params,
            target,
            td_optimizer,
            contrastive_optimizer,
            td_updates: 0,
            contrastive_updates: 0,
        })
    }

    /// Online `Q_tot` of the chosen actions, `steps·B × 1`, time-major.
    fn online_q_tot(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        let (t, b, n) = (batch.steps, batch.batch_size, batch.n_agents);
        let xs = g.constant(rows_prefix(&batch.inputs, t * b * n));
        let emb = self.nets.agent.unroll(g, xs, t, b * n);
        let q = self.nets.agent.utilities(g, emb);
        let chosen = g.pick_cols(q, &batch.actions);
        let chosen = g.reshape(chosen, t * b, n);
        let states = g.constant(rows_prefix(&batch.states, t * b));
        let (cond, _) = self.nets.conditioning(g, states, emb, t, b)?;
        Ok(self.nets.mixer.forward(g, chosen, cond))
    }

    /// `y = r + γ·(1 − terminal)·Q'_tot(next)` for every transition, with
    /// the target network taking per-agent maxima over available actions.
    pub fn td_targets(&self, batch: &Batch) -> Result<Vec<f64>> {
        let (t, b, n, a) = (batch.steps, batch.batch_size, batch.n_agents, batch.n_actions);
        let nets = &self.nets;
        let mut g = Graph::no_grad(&self.target);
        let xs = g.constant(batch.inputs.clone());
        let emb = nets.agent.unroll(&mut g, xs, t + 1, b * n);
        let q = nets.agent.utilities(&mut g, emb);
        let qv = g.value(q);
        let mut next = Vec::with_capacity(t * b * n);
        for row in b * n..(t + 1) * b * n {
            let avail = &batch.available[row * a..(row + 1) * a];
            let best = qv
                .row(row)
                .iter()
                .zip(avail)
                .filter(|(_, &ok)| ok)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            next.push(best);
        }
        let next = g.constant(Mat::from_vec(t * b, n, next));
        let states = g.constant(batch.states.clone());
        let (cond, _) = nets.conditioning(&mut g, states, emb, t + 1, b)?;
        let cond = g.slice_rows(cond, b, t * b);
        let q_next = nets.mixer.forward(&mut g, next, cond);
        let q_next = g.value(q_next).data();
        let gamma = self.config.gamma;
        Ok((0..t * b)
            .map(|j| {
                let bootstrap = if batch.terminal[j] == 1.0 || batch.mask[j] == 0.0 {
                    0.0
                } else {
                    gamma * q_next[j]
                };
                batch.rewards[j] + bootstrap
            })
            .collect())
    }

    fn td_loss_graph(&self, g: &mut Graph, batch: &Batch, targets: &[f64]) -> Result<Var> {
        let valid = batch.valid_transitions();
        if valid == 0 {
            return Err(Error::EmptyBatch);
        }
        let q_tot = self.online_q_tot(g, batch)?;
        let rows = batch.steps * batch.batch_size;
        let y = g.constant(Mat::from_vec(rows, 1, targets.to_vec()));
        let diff = g.sub(q_tot, y);
        let masked = g.mul_const(diff, Mat::from_vec(rows, 1, batch.mask.clone()));
        let sq = g.mul(masked, masked);
        let total = g.sum(sq);
        Ok(g.scale(total, 1.0 / valid as f64))
    }

    /// Masked mean squared TD error without updating anything.
    pub fn td_loss(&self, batch: &Batch) -> Result<f64> {
        let targets = self.td_targets(batch)?;
        let mut g = Graph::no_grad(&self.params);
        let loss = self.td_loss_graph(&mut g, batch, &targets)?;
        Ok(g.value(loss).get(0, 0))
    }

    /// Online `Q_tot` of the chosen actions for every (padded) transition.
    pub fn q_tot(&self, batch: &Batch) -> Result<Vec<f64>> {
        let mut g = Graph::no_grad(&self.params);
        let q = self.online_q_tot(&mut g, batch)?;
        Ok(g.value(q).data().to_vec())
    }

    /// One TD step: loss, clipped gradient step, target update.
    pub fn td_update(&mut self, batch: &Batch, lr_scale: f64) -> Result<TdStats> {
        let targets = self.td_targets(batch)?;
        let (loss, mut grads) = {
            let mut g = Graph::new(&self.params);
            let loss = self.td_loss_graph(&mut g, batch, &targets)?;
            (g.value(loss).get(0, 0), g.backward(loss))
        };
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                what: "td",
                update: self.td_updates,
            });
        }
        let grad_norm = grads.clip_global_norm(self.config.grad_clip_norm);
        self.td_optimizer
            .apply(&mut self.params, &grads, self.config.learning_rate * lr_scale);
        self.td_updates += 1;
        match self.config.target_update_mode {
            TargetUpdateMode::Soft => self.target.soft_update_from(&self.params, self.config.target_soft_tau),
            TargetUpdateMode::Hard => {
                if self.td_updates.is_multiple_of(self.config.target_update_interval) {
                    self.target.copy_from(&self.params);
                }
            }
        }
        Ok(TdStats { loss, grad_norm })
    }

    /// `(episode, timestep)` groups a contrastive update clusters over.
    pub fn contrastive_groups(&self, batch: &Batch) -> Vec<(usize, usize)> {
        batch
            .lengths
            .iter()
            .enumerate()
            .flat_map(|(b, &len)| {
                spaced_timesteps(len, self.config.contrastive_timesteps)
                    .into_iter()
                    .map(move |t| (b, t))
            })
            .collect()
    }

    /// One contrastive step on `batch`. Clusters are computed per group
    /// with K-means unless `frozen_labels` supplies them. Returns the loss
    /// before the step.
    pub fn contrastive_update(
        &mut self,
        batch: &Batch,
        lr_scale: f64,
        frozen_labels: Option<&[Vec<usize>]>,
    ) -> Result<ContrastiveStats> {
        let (t_len, b, n) = (batch.steps, batch.batch_size, batch.n_agents);
        let groups = self.contrastive_groups(batch);
        if groups.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if let Some(l) = frozen_labels {
            if l.len() != groups.len() {
                return Err(Error::InvalidArgument(format!(
                    "expected {} label groups, got {}",
                    groups.len(),
                    l.len()
                )));
            }
        }
        let idx: Vec<usize> = groups
            .iter()
            .flat_map(|&(bi, t)| (0..n).map(move |i| t * b * n + bi * n + i))
            .collect();

        let (loss, grads, labels, mean_dist) = {
            let nets = &self.nets;
            let mut g = Graph::new(&self.params);
            let xs = g.constant(rows_prefix(&batch.inputs, t_len * b * n));
            let emb = nets.agent.unroll(&mut g, xs, t_len, b * n);
            let sel = g.gather_rows(emb, &idx);

            let mut labels = Vec::with_capacity(groups.len());
            let mut dist_sum = 0.0;
            match frozen_labels {
                Some(l) => labels.extend(l.iter().cloned()),
                None => {
                    let values = g.value(sel);
                    for gi in 0..groups.len() {
                        let points: Vec<Vec<f64>> = (0..n).map(|i| values.row(gi * n + i).to_vec()).collect();
                        let seed = splitmix(self.config.seed ^ splitmix(gi as u64 + 1));
                        let a = kmeans(&points, self.config.cluster_k, seed, self.config.kmeans_max_iters)?;
                        dist_sum += a.centroid_distances(&points).iter().sum::<f64>();
                        labels.push(a.labels);
                    }
                }
            }
            let query = nets.roles.forward_query(&mut g, sel);
            let key = nets.roles.forward_key(&mut g, sel);
            let w = g.param(nets.roles.bilinear);
            let loss = infonce_graph(&mut g, query, key, w, &labels)?;
            let value = g.value(loss).get(0, 0);
            (value, g.backward(loss), labels, dist_sum / (groups.len() * n) as f64)
        };
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                what: "contrastive",
                update: self.contrastive_updates,
            });
        }
        self.contrastive_optimizer.apply(
            &mut self.params,
            &grads,
            self.config.contrastive_learning_rate * lr_scale,
        );
        self.nets
            .roles
            .momentum_update(&mut self.params, self.config.momentum_beta)?;
        self.contrastive_updates += 1;
        Ok(ContrastiveStats {
            loss,
            labels: labels.iter().map(|l| canonicalize(l)).collect(),
            groups,
            mean_centroid_distance: if frozen_labels.is_some() { f64::NAN } else { mean_dist },
        })
    }
}
