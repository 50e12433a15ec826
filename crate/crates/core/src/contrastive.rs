//! Role encoders and the cluster-based bilinear InfoNCE objective.
//!
//! For agent `i` in cluster `C`, with query representation `q_i`, key
//! representations `k_j` and bilinear matrix `W`:
//!
//! ```text
//! s_ij   = q_iᵀ W k_j
//! loss_i = −log( Σ_{j∈C, j≠i} exp(s_ij) / Σ_{j≠i} exp(s_ij) )
//! ```
//!
//! An agent alone in its cluster uses its own key as the only positive. The
//! reported loss is the mean over agents (and over groups when batched).

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kmeans::ClusterAssignment;
use crate::nn::Linear;
use crate::params::{self, ParamId, ParamStore};
use crate::tensor::Mat;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderKind {
    Query,
    Key,
}

/// Two-layer MLP from agent embedding to role representation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoleMlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl RoleMlp {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, role_dim: usize, rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), in_dim, role_dim, rng),
            out: Linear::new(store, &format!("{name}.out"), role_dim, role_dim, rng),
        }
    }

    fn forward(&self, g: &mut Graph, e: Var) -> Var {
        let h = self.hidden.forward(g, e);
        let h = g.relu(h);
        self.out.forward(g, h)
    }

    fn forward_frozen(&self, g: &mut Graph, e: Var) -> Var {
        let h = self.hidden.forward_frozen(g, e);
        let h = g.relu(h);
        self.out.forward_frozen(g, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.hidden.params().to_vec();
        p.extend(self.out.params());
        p
    }
}

/// Query encoder, momentum key encoder and the bilinear score matrix.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoleEncoders {
    pub query: RoleMlp,
    pub key: RoleMlp,
    pub bilinear: ParamId,
    pub embedding_dim: usize,
    pub role_dim: usize,
}

impl RoleEncoders {
    /// Creates both encoders with the key encoder initialized as a copy of
    /// the query encoder.
    pub fn new<R: Rng>(store: &mut ParamStore, embedding_dim: usize, role_dim: usize, rng: &mut R) -> Self {
        let query = RoleMlp::new(store, "role_query", embedding_dim, role_dim, rng);
        let key = RoleMlp::new(store, "role_key", embedding_dim, role_dim, rng);
        let bilinear = store.add_uniform("role.bilinear", role_dim, role_dim, role_dim, rng);
        let enc = Self {
            query,
            key,
            bilinear,
            embedding_dim,
            role_dim,
        };
        for (k, q) in enc.key_query_pairs() {
            let v = store.get(q).clone();
            store.set(k, v).expect("identical shapes");
        }
        enc
    }

    /// `(key tensor, matching query tensor)` pairs.
    pub fn key_query_pairs(&self) -> Vec<(ParamId, ParamId)> {
        self.key.params().into_iter().zip(self.query.params()).collect()
    }

    /// Parameters trained by gradient descent: the query encoder and `W`.
    pub fn trainable_params(&self) -> Vec<ParamId> {
        let mut p = self.query.params();
        p.push(self.bilinear);
        p
    }

    pub fn forward_query(&self, g: &mut Graph, e: Var) -> Var {
        self.query.forward(g, e)
    }

    /// Key representations. Parameters are read as constants and the input
    /// is detached, so nothing upstream receives a gradient.
    pub fn forward_key(&self, g: &mut Graph, e: Var) -> Var {
        let e = g.detach(e);
        self.key.forward_frozen(g, e)
    }

    pub fn encode(&self, store: &ParamStore, embedding: &[f64], which: EncoderKind) -> Result<Vec<f64>> {
        if embedding.len() != self.embedding_dim {
            return Err(Error::ShapeMismatch {
                what: "agent embedding".into(),
                expected: (1, self.embedding_dim),
                actual: (1, embedding.len()),
            });
        }
        let reps = self.encode_batch(store, &Mat::row_vector(embedding.to_vec()), which);
        Ok(reps.into_vec())
    }

    pub fn encode_batch(&self, store: &ParamStore, embeddings: &Mat, which: EncoderKind) -> Mat {
        let mut g = Graph::no_grad(store);
        let e = g.constant(embeddings.clone());
        let z = match which {
            EncoderKind::Query => self.forward_query(&mut g, e),
            EncoderKind::Key => self.forward_key(&mut g, e),
        };
        g.value(z).clone()
    }

    /// `θ_k ← β·θ_k + (1 − β)·θ_q`.
    pub fn momentum_update(&self, store: &mut ParamStore, beta: f64) -> Result<()> {
        params::momentum_update(store, &self.key_query_pairs(), beta)
    }
}

/// Positive and denominator masks for one group, row-major `n × n`.
pub fn pair_masks(labels: &[usize]) -> (Vec<bool>, Vec<bool>) {
    let n = labels.len();
    let mut pos = vec![false; n * n];
    let mut all = vec![false; n * n];
    for i in 0..n {
        let mut has_peer = false;
        for j in 0..n {
            if j == i {
                continue;
            }
            all[i * n + j] = true;
            if labels[j] == labels[i] {
                pos[i * n + j] = true;
                has_peer = true;
            }
        }
        if !has_peer {
            pos[i * n + i] = true;
            all[i * n + i] = true;
        }
    }
    (pos, all)
}

/// Batched InfoNCE on a tape. `query` and `key` hold `G` groups of `n`
/// consecutive rows; `labels[g]` is the cluster labelling of group `g`.
/// Returns the mean per-agent loss as a `1 × 1` node.
pub fn infonce_graph(g: &mut Graph, query: Var, key: Var, bilinear: Var, labels: &[Vec<usize>]) -> Result<Var> {
    let n = labels.first().map_or(0, Vec::len);
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let rows = g.value(query).rows();
    if rows != labels.len() * n || g.value(key).rows() != rows {
        return Err(Error::ShapeMismatch {
            what: "contrastive representations".into(),
            expected: (labels.len() * n, g.value(query).cols()),
            actual: g.value(query).shape(),
        });
    }
    let qw = g.matmul(query, bilinear);
    let scores = g.group_outer_dot(qw, key, n);
    {
        let s = g.value(scores);
        for r in 0..s.rows() {
            for j in 0..n {
                if !s.get(r, j).is_finite() {
                    return Err(Error::NonFiniteScore {
                        query: r,
                        key: (r / n) * n + j,
                    });
                }
            }
        }
    }
    let mut pos = Vec::with_capacity(rows * n);
    let mut all = Vec::with_capacity(rows * n);
    for group in labels {
        if group.len() != n {
            return Err(Error::InvalidArgument("groups must have equal size".into()));
        }
        let (p, a) = pair_masks(group);
        pos.extend(p);
        all.extend(a);
    }
    let lse_all = g.masked_logsumexp(scores, all);
    let lse_pos = g.masked_logsumexp(scores, pos);
    let per_agent = g.sub(lse_all, lse_pos);
    Ok(g.mean(per_agent))
}

/// Gradients of [`infonce_loss`].
#[derive(Clone, Debug)]
pub struct InfoNceGrad {
    pub loss: f64,
    pub bilinear: Mat,
    pub query: Mat,
}

fn check_inputs(query: &Mat, key: &Mat, assignment: &ClusterAssignment, w: &Mat) -> Result<()> {
    let (n, d) = query.shape();
    if key.shape() != (n, d) {
        return Err(Error::ShapeMismatch {
            what: "key representations".into(),
            expected: (n, d),
            actual: key.shape(),
        });
    }
    if w.shape() != (d, d) {
        return Err(Error::ShapeMismatch {
            what: "bilinear matrix".into(),
            expected: (d, d),
            actual: w.shape(),
        });
    }
    if assignment.labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {n} agents",
            assignment.labels.len()
        )));
    }
    Ok(())
}

/// Mean InfoNCE loss for one group of `n` agents.
pub fn infonce_loss(query: &Mat, key: &Mat, assignment: &ClusterAssignment, w: &Mat) -> Result<f64> {
    Ok(infonce_loss_grad(query, key, assignment, w)?.loss)
}

/// [`infonce_loss`] with analytic gradients w.r.t. `W` and the query
/// representations.
pub fn infonce_loss_grad(query: &Mat, key: &Mat, assignment: &ClusterAssignment, w: &Mat) -> Result<InfoNceGrad> {
    check_inputs(query, key, assignment, w)?;
    let mut g = Graph::detached();
    let q = g.input(query.clone(), true);
    let k = g.constant(key.clone());
    let wv = g.input(w.clone(), true);
    let loss = infonce_graph(&mut g, q, k, wv, std::slice::from_ref(&assignment.labels))?;
    let grads = g.backward(loss);
    let (n, d) = query.shape();
    Ok(InfoNceGrad {
        loss: g.value(loss).get(0, 0),
        bilinear: grads.input(wv).cloned().unwrap_or_else(|| Mat::zeros(d, d)),
        query: grads.input(q).cloned().unwrap_or_else(|| Mat::zeros(n, d)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity(d: usize) -> Mat {
        let mut m = Mat::zeros(d, d);
        for i in 0..d {
            m.set(i, i, 1.0);
        }
        m
    }

    #[test]
    fn all_positive_pairs_give_zero_loss() {
        let q = Mat::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.5]]);
        let k = Mat::from_rows(&[vec![1.0, 0.1], vec![-0.4, 0.9]]);
        let a = ClusterAssignment::from_labels(vec![0, 0]);
        assert_eq!(infonce_loss(&q, &k, &a, &identity(2)).unwrap(), 0.0);
    }

    #[test]
    fn two_singletons() {
        let mut e0 = vec![0.0; 64];
        e0[0] = 1.0;
        let mut e1 = vec![0.0; 64];
        e1[1] = 1.0;
        let z = Mat::from_rows(&[e0, e1]);
        let a = ClusterAssignment::from_labels(vec![0, 1]);
        let loss = infonce_loss(&z, &z, &a, &identity(64)).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((loss - expected).abs() < 1e-15);
        assert!((loss - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn masks_exclude_self_unless_alone() {
        let (pos, all) = pair_masks(&[0, 0, 1]);
        assert_eq!(pos, vec![false, true, false, true, false, false, false, false, true]);
        assert_eq!(all, vec![false, true, true, true, false, true, true, true, true]);
    }

    #[test]
    fn non_finite_score_names_the_pair() {
        let q = Mat::from_rows(&[vec![1.0], vec![f64::NAN]]);
        let k = Mat::from_rows(&[vec![1.0], vec![1.0]]);
        let a = ClusterAssignment::from_labels(vec![0, 1]);
        match infonce_loss(&q, &k, &a, &identity(1)) {
            Err(Error::NonFiniteScore { query: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn key_init_matches_query_and_zero_encoder_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let enc = RoleEncoders::new(&mut store, 8, 4, &mut rng);
        let e: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
        assert_eq!(
            enc.encode(&store, &e, EncoderKind::Query).unwrap(),
            enc.encode(&store, &e, EncoderKind::Key).unwrap()
        );
        let ids: Vec<_> = store.ids().collect();
        store.fill(&ids, 0.0);
        let z = enc.encode(&store, &[0.0; 8], EncoderKind::Query).unwrap();
        assert!(z.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn key_path_carries_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let enc = RoleEncoders::new(&mut store, 6, 3, &mut rng);
        let emb = Mat::from_vec(4, 6, (0..24).map(|i| (i as f64 * 0.37).sin()).collect());
        let mut g = Graph::new(&store);
        let e = g.input(emb, true);
        let zq = enc.forward_query(&mut g, e);
        let zk = enc.forward_key(&mut g, e);
        let w = g.param(enc.bilinear);
        let loss = infonce_graph(&mut g, zq, zk, w, &[vec![0, 0, 1, 1]]).unwrap();
        let grads = g.backward(loss);
        for id in enc.key.params() {
            assert!(grads.param(id).is_none());
        }
        for id in enc.trainable_params() {
            assert!(grads.param(id).is_some());
        }
    }
}
