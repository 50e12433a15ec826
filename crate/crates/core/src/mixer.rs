//! Monotonic mixing network with hypernetwork-generated weights.
//!
//! ```text
//! W1 = |hyper_w1(c)|  (n × m)     b1 = hyper_b1(c)
//! w2 = |hyper_w2(c)|  (m)         b2 = hyper_b2(c)
//! Q_tot = w2 · relu(W1ᵀ q + b1) + b2
//! ```
//!
//! Only the generated weights pass through `abs`, which makes `Q_tot`
//! non-decreasing in every per-agent utility.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// `Linear → ReLU → Linear`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HyperNet {
    pub hidden: Linear,
    pub out: Linear,
}

impl HyperNet {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, out: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), in_dim, hidden, rng),
            out: Linear::new(store, &format!("{name}.out"), hidden, out, rng),
        }
    }

    fn forward(&self, g: &mut Graph, c: Var) -> Var {
        let h = self.hidden.forward(g, c);
        let h = g.relu(h);
        self.out.forward(g, h)
    }

    fn params(&self) -> Vec<ParamId> {
        let mut p = self.hidden.params().to_vec();
        p.extend(self.out.params());
        p
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mixer {
    pub hyper_w1: HyperNet,
    pub hyper_b1: Linear,
    pub hyper_w2: HyperNet,
    pub hyper_b2: HyperNet,
    pub n_agents: usize,
    pub cond_dim: usize,
    pub mixing_dim: usize,
}

impl Mixer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        n_agents: usize,
        cond_dim: usize,
        hypernet_hidden: usize,
        mixing_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            hyper_w1: HyperNet::new(
                store,
                "mixer.hyper_w1",
                cond_dim,
                hypernet_hidden,
                n_agents * mixing_dim,
                rng,
            ),
            hyper_b1: Linear::new(store, "mixer.hyper_b1", cond_dim, mixing_dim, rng),
            hyper_w2: HyperNet::new(store, "mixer.hyper_w2", cond_dim, hypernet_hidden, mixing_dim, rng),
            hyper_b2: HyperNet::new(store, "mixer.hyper_b2", cond_dim, hypernet_hidden, 1, rng),
            n_agents,
            cond_dim,
            mixing_dim,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.hyper_w1.params();
        p.extend(self.hyper_b1.params());
        p.extend(self.hyper_w2.params());
        p.extend(self.hyper_b2.params());
        p
    }

    /// `q`: `B × n` chosen utilities, `cond`: `B × cond_dim`. Returns `B × 1`.
    pub fn forward(&self, g: &mut Graph, q: Var, cond: Var) -> Var {
        let w1 = self.hyper_w1.forward(g, cond);
        let w1 = g.abs(w1);
        let b1 = self.hyper_b1.forward(g, cond);
        let hidden = g.batch_vec_mat(q, w1, self.mixing_dim);
        let hidden = g.add(hidden, b1);
        let hidden = g.relu(hidden);
        let w2 = self.hyper_w2.forward(g, cond);
        let w2 = g.abs(w2);
        let b2 = self.hyper_b2.forward(g, cond);
        let prod = g.mul(hidden, w2);
        let s = g.row_sum(prod);
        g.add(s, b2)
    }

    /// `Q_tot` for one set of utilities and conditioning vector.
    pub fn mix(&self, store: &ParamStore, q: &[f64], cond: &[f64]) -> Result<f64> {
        if q.len() != self.n_agents || cond.len() != self.cond_dim {
            return Err(Error::InvalidArgument(format!(
                "mixer expects {} utilities and a {}-dim condition, got {} and {}",
                self.n_agents,
                self.cond_dim,
                q.len(),
                cond.len()
            )));
        }
        let mut g = Graph::no_grad(store);
        let qv = g.constant(Mat::row_vector(q.to_vec()));
        let cv = g.constant(Mat::row_vector(cond.to_vec()));
        let out = self.forward(&mut g, qv, cv);
        Ok(g.value(out).get(0, 0))
    }

    /// `Q_tot` conditioned on `concat(τ_mha, τ)`.
    pub fn mix_with_attention(&self, store: &ParamStore, q: &[f64], tau: &[f64], tau_mha: &[f64]) -> Result<f64> {
        let mut cond = tau_mha.to_vec();
        cond.extend_from_slice(tau);
        self.mix(store, q, &cond)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_output_from_final_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mixer = Mixer::new(&mut store, 3, 8, 4, 4, &mut rng);
        store.fill(&mixer.params(), 0.0);
        store.fill(&[mixer.hyper_b2.out.bias], 5.0);
        for q in [[0.0, 0.0, 0.0], [10.0, -3.0, 2.5]] {
            assert_eq!(mixer.mix(&store, &q, &[0.3; 8]).unwrap(), 5.0);
        }
    }

    #[test]
    fn increasing_one_utility_never_lowers_q_tot() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let mixer = Mixer::new(&mut store, 4, 6, 8, 8, &mut rng);
        let cond: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let base = mixer.mix(&store, &q, &cond).unwrap();
        for i in 0..4 {
            let mut up = q.clone();
            up[i] += 0.5;
            assert!(mixer.mix(&store, &up, &cond).unwrap() >= base);
        }
    }

    #[test]
    fn attention_conditioning_is_tau_mha_then_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mixer = Mixer::new(&mut store, 2, 4, 4, 4, &mut rng);
        let a = mixer
            .mix_with_attention(&store, &[1.0, 2.0], &[0.1, 0.2], &[0.3, 0.4])
            .unwrap();
        let b = mixer.mix(&store, &[1.0, 2.0], &[0.3, 0.4, 0.1, 0.2]).unwrap();
        assert_eq!(a, b);
        assert!(mixer.mix(&store, &[1.0], &[0.0; 4]).is_err());
    }
}
