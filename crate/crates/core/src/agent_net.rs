//! Shared per-agent trajectory encoder and utility head.
//!
//! `input → Linear → ReLU → GRU → embedding → Linear → utilities`. The input
//! is the agent's observation concatenated with the one-hot of its previous
//! action (all zeros at the first step). There is no agent-id input: every
//! agent runs the same parameters.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Gru, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AgentNet {
    pub fc_in: Linear,
    pub gru: Gru,
    pub head: Linear,
    pub obs_dim: usize,
    pub n_actions: usize,
    pub embedding_dim: usize,
}

impl AgentNet {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        obs_dim: usize,
        n_actions: usize,
        embedding_dim: usize,
        rng: &mut R,
    ) -> Self {
        let fc_in = Linear::new(store, "agent.fc_in", obs_dim + n_actions, embedding_dim, rng);
        let gru = Gru::new(store, "agent.gru", embedding_dim, embedding_dim, rng);
        let head = Linear::new(store, "agent.head", embedding_dim, n_actions, rng);
        Self {
            fc_in,
            gru,
            head,
            obs_dim,
            n_actions,
            embedding_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.obs_dim + self.n_actions
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.fc_in.params().to_vec();
        p.extend(self.gru.params());
        p.extend(self.head.params());
        p
    }

    /// One recurrent step for `m` agents at once (`x`: `m × input_dim`,
    /// `h`: `m × embedding_dim`).
    pub fn step(&self, g: &mut Graph, x: Var, h: Var) -> Var {
        let a = self.fc_in.forward(g, x);
        let a = g.relu(a);
        self.gru.step(g, a, h)
    }

    /// Runs `steps` time steps for `m` parallel agents. `xs` is time-major
    /// (`steps·m × input_dim`); returns embeddings in the same layout.
    pub fn unroll(&self, g: &mut Graph, xs: Var, steps: usize, m: usize) -> Var {
        let a = self.fc_in.forward(g, xs);
        let a = g.relu(a);
        self.gru.unroll(g, a, steps, m)
    }

    pub fn utilities(&self, g: &mut Graph, embeddings: Var) -> Var {
        self.head.forward(g, embeddings)
    }

    /// `e_t = f(o_t, a_{t-1}, e_{t-1})` for a single agent.
    pub fn embed_step(&self, store: &ParamStore, obs: &[f64], last_action: &[f64], prev: &[f64]) -> Result<Vec<f64>> {
        if obs.len() != self.obs_dim {
            return Err(Error::ShapeMismatch {
                what: "observation".into(),
                expected: (1, self.obs_dim),
                actual: (1, obs.len()),
            });
        }
        if last_action.len() != self.n_actions {
            return Err(Error::ShapeMismatch {
                what: "last action one-hot".into(),
                expected: (1, self.n_actions),
                actual: (1, last_action.len()),
            });
        }
        if prev.len() != self.embedding_dim {
            return Err(Error::ShapeMismatch {
                what: "previous embedding".into(),
                expected: (1, self.embedding_dim),
                actual: (1, prev.len()),
            });
        }
        let mut input = obs.to_vec();
        input.extend_from_slice(last_action);
        let (emb, _) = self.step_batch(store, &Mat::row_vector(input), &Mat::row_vector(prev.to_vec()));
        Ok(emb.into_vec())
    }

    /// Per-action utilities of one embedding. No masking.
    pub fn q_values(&self, store: &ParamStore, embedding: &[f64]) -> Result<Vec<f64>> {
        if embedding.len() != self.embedding_dim {
            return Err(Error::ShapeMismatch {
                what: "embedding".into(),
                expected: (1, self.embedding_dim),
                actual: (1, embedding.len()),
            });
        }
        let mut g = Graph::no_grad(store);
        let e = g.constant(Mat::row_vector(embedding.to_vec()));
        let q = self.utilities(&mut g, e);
        Ok(g.value(q).clone().into_vec())
    }

    /// Forward step for a batch of agents without gradient tracking.
    /// Returns `(embeddings, utilities)`.
    pub fn step_batch(&self, store: &ParamStore, inputs: &Mat, prev: &Mat) -> (Mat, Mat) {
        let mut g = Graph::no_grad(store);
        let x = g.constant(inputs.clone());
        let h = g.constant(prev.clone());
        let e = self.step(&mut g, x, h);
        let q = self.utilities(&mut g, e);
        (g.value(e).clone(), g.value(q).clone())
    }
}

/// ε-greedy over available actions. With probability `epsilon` a uniform
/// draw over available actions, otherwise the masked argmax (lowest index
/// wins ties).
pub fn select_action<R: Rng>(q: &[f64], mask: &[bool], epsilon: f64, rng: &mut R) -> Result<usize> {
    if q.len() != mask.len() {
        return Err(Error::ShapeMismatch {
            what: "action mask".into(),
            expected: (1, q.len()),
            actual: (1, mask.len()),
        });
    }
    let available: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    if available.is_empty() {
        return Err(Error::NoAvailableAction);
    }
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return Ok(available[rng.random_range(0..available.len())]);
    }
    Ok(greedy_action(q, mask).expect("non-empty mask"))
}

pub fn greedy_action(q: &[f64], mask: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (&v, &m)) in q.iter().zip(mask).enumerate() {
        if m && best.is_none_or(|b| v > q[b]) {
            best = Some(i);
        }
    }
    best
}

pub fn one_hot(index: usize, len: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_give_zero_embedding_and_utilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let net = AgentNet::new(&mut store, 6, 4, 8, &mut rng);
        let ids: Vec<_> = store.ids().collect();
        store.fill(&ids, 0.0);
        // h' = (1 - 0.5)·tanh(0) + 0.5·0 = 0
        let e = net.embed_step(&store, &[0.0; 6], &[0.0; 4], &[0.0; 8]).unwrap();
        assert!(e.iter().all(|&x| x == 0.0));
        let q = net.q_values(&store, &e).unwrap();
        assert!(q.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bias_only_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let net = AgentNet::new(&mut store, 6, 4, 8, &mut rng);
        store.fill(&[net.head.weight], 0.0);
        let b = Mat::from_vec(1, 4, vec![0.5, -1.0, 2.0, 3.0]);
        store.set(net.head.bias, b.clone()).unwrap();
        let q = net.q_values(&store, &[0.7; 8]).unwrap();
        assert_eq!(q, b.data());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let net = AgentNet::new(&mut store, 6, 4, 8, &mut rng);
        assert!(net.embed_step(&store, &[0.0; 5], &[0.0; 4], &[0.0; 8]).is_err());
        assert!(net.embed_step(&store, &[0.0; 6], &[0.0; 3], &[0.0; 8]).is_err());
        assert!(net.q_values(&store, &[0.0; 7]).is_err());
    }

    #[test]
    fn greedy_selection_and_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_action(&[1.0, 5.0, 3.0], &[true; 3], 0.0, &mut rng).unwrap(), 1);
        assert_eq!(select_action(&[9.0, 9.0, 1.0], &[true; 3], 0.0, &mut rng).unwrap(), 0);
        assert_eq!(
            select_action(&[9.0, 1.0, 2.0], &[false, true, true], 0.0, &mut rng).unwrap(),
            2
        );
        assert!(matches!(
            select_action(&[1.0, 2.0], &[false, false], 0.5, &mut rng),
            Err(Error::NoAvailableAction)
        ));
    }

    #[test]
    fn uniform_exploration_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mask = [true, false, true];
        let q = [0.0, 100.0, 5.0];
        let draws = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..draws {
            counts[select_action(&q, &mask, 1.0, &mut rng).unwrap()] += 1;
        }
        assert_eq!(counts[1], 0);
        for c in [counts[0], counts[2]] {
            let f = c as f64 / draws as f64;
            assert!((f - 0.5).abs() <= 0.01, "frequency {f}");
        }
    }
}
