//! Multi-head attention from the state embedding onto role representations.
//!
//! The state embedding `τ` is a single query; the `n` role representations
//! serve as keys and values. Per head `h`:
//!
//! ```text
//! α_h   = softmax_i( (τ W_h^Q) · (z_i W_h^K) / sqrt(d_k) )
//! out_h = Σ_i α_h,i · z_i W_h^V
//! τ_mha = concat(out_1, …, out_H) · W^O
//! ```

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionHead {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub heads: Vec<AttentionHead>,
    pub output: ParamId,
    pub state_dim: usize,
    pub role_dim: usize,
    pub head_dim: usize,
    pub out_dim: usize,
}

/// Result of attending over one set of role representations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionOutput {
    pub tau_mha: Vec<f64>,
    /// `H × n` attention weights.
    pub weights: Mat,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        state_dim: usize,
        role_dim: usize,
        heads: usize,
        head_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let heads = (0..heads)
            .map(|h| AttentionHead {
                query: store.add_uniform(format!("attn.head{h}.query"), state_dim, head_dim, state_dim, rng),
                key: store.add_uniform(format!("attn.head{h}.key"), role_dim, head_dim, role_dim, rng),
                value: store.add_uniform(format!("attn.head{h}.value"), role_dim, head_dim, role_dim, rng),
            })
            .collect::<Vec<_>>();
        let concat = heads.len() * head_dim;
        let output = store.add_uniform("attn.output", concat, out_dim, concat, rng);
        Self {
            heads,
            output,
            state_dim,
            role_dim,
            head_dim,
            out_dim,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p: Vec<ParamId> = self.heads.iter().flat_map(|h| [h.query, h.key, h.value]).collect();
        p.push(self.output);
        p
    }

    /// Batched attention. `tau` is `B × state_dim`, `roles` is
    /// `B·n × role_dim` (group `b` in rows `b·n..(b+1)·n`). Returns
    /// `τ_mha` (`B × out_dim`) and one `B × n` weight node per head.
    pub fn forward(&self, g: &mut Graph, tau: Var, roles: Var, n: usize) -> Result<(Var, Vec<Var>)> {
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut weights = Vec::with_capacity(self.heads.len());
        for (h, head) in self.heads.iter().enumerate() {
            let wq = g.param(head.query);
            let wk = g.param(head.key);
            let wv = g.param(head.value);
            let q = g.matmul(tau, wq);
            let k = g.matmul(roles, wk);
            let v = g.matmul(roles, wv);
            let logits = g.group_dot(q, k, n);
            let logits = g.scale(logits, scale);
            if let Some(pos) = g.value(logits).data().iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFiniteLogit {
                    head: h,
                    agent: pos % n,
                });
            }
            let alpha = g.softmax_rows(logits);
            outs.push(g.group_weighted_sum(alpha, v));
            weights.push(alpha);
        }
        let cat = g.concat_cols(&outs);
        let wo = g.param(self.output);
        Ok((g.matmul(cat, wo), weights))
    }

    /// Attention for a single state embedding over `roles` (`n × role_dim`).
    pub fn attend(&self, store: &ParamStore, tau: &[f64], roles: &Mat) -> Result<AttentionOutput> {
        let n = roles.rows();
        if n == 0 {
            return Err(Error::InvalidArgument("attention needs at least one agent".into()));
        }
        if tau.len() != self.state_dim || roles.cols() != self.role_dim {
            return Err(Error::ShapeMismatch {
                what: "attention inputs".into(),
                expected: (n, self.role_dim),
                actual: roles.shape(),
            });
        }
        let mut g = Graph::no_grad(store);
        let t = g.constant(Mat::row_vector(tau.to_vec()));
        let z = g.constant(roles.clone());
        let (out, heads) = self.forward(&mut g, t, z, n)?;
        let mut weights = Mat::zeros(heads.len(), n);
        for (h, &w) in heads.iter().enumerate() {
            weights.row_mut(h).copy_from_slice(g.value(w).row(0));
        }
        Ok(AttentionOutput {
            tau_mha: g.value(out).clone().into_vec(),
            weights,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (ParamStore, MultiHeadAttention) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, 6, 4, 2, 3, 5, &mut rng);
        (store, mha)
    }

    #[test]
    fn single_agent_gets_full_weight() {
        let (store, mha) = small();
        let z = Mat::from_rows(&[vec![0.4, -1.0, 2.0, 0.1]]);
        let out = mha.attend(&store, &[0.3; 6], &z).unwrap();
        assert!(out.weights.data().iter().all(|&w| w == 1.0));

        // τ_mha = concat_h(z W_h^V) W^O
        let mut cat = Vec::new();
        for h in &mha.heads {
            cat.extend(z.matmul(store.get(h.value)).into_vec());
        }
        let expected = Mat::row_vector(cat).matmul(store.get(mha.output));
        for (a, b) in out.tau_mha.iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_roles_get_uniform_weight() {
        let (store, mha) = small();
        let z = Mat::from_rows(&vec![vec![0.2, 0.9, -0.3, 1.1]; 3]);
        let out = mha.attend(&store, &[0.5, -0.1, 0.0, 0.7, 1.0, -2.0], &z).unwrap();
        for &w in out.weights.data() {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_empty_and_misshaped_inputs() {
        let (store, mha) = small();
        assert!(mha.attend(&store, &[0.0; 6], &Mat::zeros(0, 4)).is_err());
        assert!(mha.attend(&store, &[0.0; 5], &Mat::zeros(2, 4)).is_err());
        assert!(mha.attend(&store, &[0.0; 6], &Mat::zeros(2, 3)).is_err());
    }

    #[test]
    fn non_finite_logit_is_reported() {
        let (store, mha) = small();
        let z = Mat::from_rows(&[vec![0.0; 4], vec![f64::INFINITY, 0.0, 0.0, 0.0]]);
        assert!(matches!(
            mha.attend(&store, &[1.0; 6], &z),
            Err(Error::NonFiniteLogit { head: 0, agent: 1 })
        ));
    }
}
