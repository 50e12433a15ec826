//! Layers built on the autodiff tape, and the Adam optimizer.

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Mat;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Affine map `x·W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), in_dim, out_dim, in_dim, rng);
        let bias = store.add_uniform(format!("{name}.bias"), 1, out_dim, in_dim, rng);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let h = g.matmul(x, w);
        g.add_row(h, b)
    }

    /// Forward pass with parameters treated as constants.
    pub fn forward_frozen(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.frozen_param(self.weight);
        let b = g.frozen_param(self.bias);
        let h = g.matmul(x, w);
        g.add_row(h, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Gated recurrent unit cell with gate order (reset, update, candidate):
///
/// ```text
/// r  = σ(x·W_ir + b_ir + h·W_hr + b_hr)
/// u  = σ(x·W_iu + b_iu + h·W_hu + b_hu)
/// c  = tanh(x·W_ic + b_ic + r ⊙ (h·W_hc + b_hc))
/// h' = (1 − u) ⊙ c + u ⊙ h
/// ```
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Gru {
    pub input: Linear,
    pub hidden: Linear,
    pub hidden_dim: usize,
}

impl Gru {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        // Both maps use the hidden size as fan-in, like the usual GRU init.
        let w_i = store.add_uniform(format!("{name}.w_input"), in_dim, 3 * hidden_dim, hidden_dim, rng);
        let b_i = store.add_uniform(format!("{name}.b_input"), 1, 3 * hidden_dim, hidden_dim, rng);
        let w_h = store.add_uniform(format!("{name}.w_hidden"), hidden_dim, 3 * hidden_dim, hidden_dim, rng);
        let b_h = store.add_uniform(format!("{name}.b_hidden"), 1, 3 * hidden_dim, hidden_dim, rng);
        Self {
            input: Linear {
                weight: w_i,
                bias: b_i,
                in_dim,
                out_dim: 3 * hidden_dim,
            },
            hidden: Linear {
                weight: w_h,
                bias: b_h,
                in_dim: hidden_dim,
                out_dim: 3 * hidden_dim,
            },
            hidden_dim,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.input.in_dim
    }

    /// Input-side gate pre-activations `x·W_i + b_i`. Independent of the
    /// recurrence, so a whole sequence can go through in one product.
    pub fn project_input(&self, g: &mut Graph, x: Var) -> Var {
        self.input.forward(g, x)
    }

    /// One recurrent step given the projected input `gi` (`m × 3H`).
    pub fn step_projected(&self, g: &mut Graph, gi: Var, h: Var) -> Var {
        let hd = self.hidden_dim;
        let gh = self.hidden.forward(g, h);
        let gi_r = g.slice_cols(gi, 0, hd);
        let gh_r = g.slice_cols(gh, 0, hd);
        let gi_u = g.slice_cols(gi, hd, hd);
        let gh_u = g.slice_cols(gh, hd, hd);
        let gi_c = g.slice_cols(gi, 2 * hd, hd);
        let gh_c = g.slice_cols(gh, 2 * hd, hd);
        let r = g.add(gi_r, gh_r);
        let r = g.sigmoid(r);
        let u = g.add(gi_u, gh_u);
        let u = g.sigmoid(u);
        let rc = g.mul(r, gh_c);
        let c = g.add(gi_c, rc);
        let c = g.tanh(c);
        // h' = c + u ⊙ (h − c)
        let d = g.sub(h, c);
        let ud = g.mul(u, d);
        g.add(c, ud)
    }

    pub fn step(&self, g: &mut Graph, x: Var, h: Var) -> Var {
        let gi = self.project_input(g, x);
        self.step_projected(g, gi, h)
    }

    /// Unrolls over `steps` time steps. `xs` stacks inputs time-major:
    /// rows `t·m .. (t+1)·m` hold step `t` for `m` parallel sequences.
    /// Returns the stacked hidden states in the same layout.
    pub fn unroll(&self, g: &mut Graph, xs: Var, steps: usize, m: usize) -> Var {
        let gi_all = self.project_input(g, xs);
        let mut h = g.constant(Mat::zeros(m, self.hidden_dim));
        let mut outs = Vec::with_capacity(steps);
        for t in 0..steps {
            let gi = g.slice_rows(gi_all, t * m, m);
            h = self.step_projected(g, gi, h);
            outs.push(h);
        }
        g.concat_rows(&outs)
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.input.weight, self.input.bias, self.hidden.weight, self.hidden.bias]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over a subset of a store's tensors.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    managed: Vec<ParamId>,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore, managed: Vec<ParamId>, config: AdamConfig) -> Self {
        let m = managed
            .iter()
            .map(|&id| {
                let (r, c) = store.get(id).shape();
                Mat::zeros(r, c)
            })
            .collect::<Vec<_>>();
        let v = m.clone();
        Self {
            config,
            step: 0,
            managed,
            m,
            v,
        }
    }

    pub fn managed(&self) -> &[ParamId] {
        &self.managed
    }

    pub fn moments(&self) -> (&[Mat], &[Mat]) {
        (&self.m, &self.v)
    }

    /// Replaces the step count and moment estimates, e.g. from a checkpoint.
    pub fn restore(&mut self, step: u64, m: Vec<Mat>, v: Vec<Mat>) -> Result<()> {
        for (what, given) in [("first moments", &m), ("second moments", &v)] {
            if given.len() != self.m.len() {
                return Err(Error::InvalidArgument(format!(
                    "optimizer {what}: expected {} tensors, got {}",
                    self.m.len(),
                    given.len()
                )));
            }
            for (have, new) in self.m.iter().zip(given) {
                if have.shape() != new.shape() {
                    return Err(Error::ShapeMismatch {
                        what: format!("optimizer {what}"),
                        expected: have.shape(),
                        actual: new.shape(),
                    });
                }
            }
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// Applies one update. Gradients for tensors this optimizer does not
    /// manage are ignored; managed tensors without a gradient see a zero one.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (slot, &id) in self.managed.iter().enumerate() {
            let grad = grads.param(id);
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let p = store.get_mut(id);
            for e in 0..p.len() {
                let gr = grad.map_or(0.0, |g| g.data()[e]);
                let me = beta1 * m.data()[e] + (1.0 - beta1) * gr;
                let ve = beta2 * v.data()[e] + (1.0 - beta2) * gr * gr;
                m.data_mut()[e] = me;
                v.data_mut()[e] = ve;
                let update = lr * (me / bc1) / ((ve / bc2).sqrt() + eps);
                p.data_mut()[e] -= update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gru_unroll_matches_stepwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, "gru", 3, 5, &mut rng);
        let steps = 4;
        let m = 2;
        let xs: Vec<f64> = (0..steps * m * 3).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.5).collect();
        let mut g = Graph::no_grad(&store);
        let x_all = g.constant(Mat::from_vec(steps * m, 3, xs.clone()));
        let unrolled = gru.unroll(&mut g, x_all, steps, m);
        let unrolled = g.value(unrolled).clone();

        let mut g = Graph::no_grad(&store);
        let mut h = g.constant(Mat::zeros(m, 5));
        for t in 0..steps {
            let x = g.constant(Mat::from_vec(m, 3, xs[t * m * 3..(t + 1) * m * 3].to_vec()));
            h = gru.step(&mut g, x, h);
            let got = g.value(h);
            for r in 0..m {
                for (a, b) in got.row(r).iter().zip(unrolled.row(t * m + r)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut store = ParamStore::new();
        let w = store.add("w", Mat::from_vec(1, 2, vec![0.3, -0.2]));
        let before = store.clone();
        let mut opt = Adam::new(&store, vec![w], AdamConfig::default());
        let g = Graph::no_grad(&before);
        let mut g2 = g;
        let c = g2.constant(Mat::zeros(1, 1));
        let grads = g2.backward(c);
        opt.apply(&mut store, &grads, 1e-2);
        assert_eq!(store, before);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let w = store.add("w", Mat::from_vec(1, 1, vec![3.0]));
        let mut opt = Adam::new(&store, vec![w], AdamConfig::default());
        for _ in 0..2000 {
            let snapshot = store.clone();
            let grads = {
                let mut g = Graph::new(&snapshot);
                let p = g.param(w);
                let sq = g.mul(p, p);
                let l = g.sum(sq);
                g.backward(l)
            };
            opt.apply(&mut store, &grads, 0.01);
        }
        assert!(store.get(w).get(0, 0).abs() < 1e-2);
    }
}
