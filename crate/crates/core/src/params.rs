//! Named parameter storage, initialization and in-place parameter arithmetic
//! (soft target updates and the momentum key-encoder update).

use crate::error::{Error, Result};
use crate::tensor::Mat;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    value: Mat,
}

/// Flat, ordered collection of named parameter tensors.
///
/// Online and target networks are two stores with identical layout, so a
/// [`ParamId`] is valid in both.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(Entry { name, value });
        ParamId(self.entries.len() - 1)
    }

    /// Adds a `fan_in × fan_out` tensor drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Mat::from_vec(rows, cols, data))
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Replaces a tensor, requiring the shape to stay the same.
    pub fn set(&mut self, id: ParamId, value: Mat) -> Result<()> {
        let slot = &mut self.entries[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                what: slot.name.clone(),
                expected: slot.value.shape(),
                actual: value.shape(),
            });
        }
        slot.value = value;
        Ok(())
    }

    pub fn fill(&mut self, ids: &[ParamId], value: f64) {
        for &id in ids {
            self.get_mut(id).data_mut().fill(value);
        }
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn check_same_layout(&self, other: &ParamStore) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count differs: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.name != b.name {
                return Err(Error::Checkpoint(format!(
                    "parameter name differs: {} vs {}",
                    a.name, b.name
                )));
            }
            if a.value.shape() != b.value.shape() {
                return Err(Error::ShapeMismatch {
                    what: a.name.clone(),
                    expected: a.value.shape(),
                    actual: b.value.shape(),
                });
            }
        }
        Ok(())
    }

    /// `target ← (1 − tau)·target + tau·online` over every tensor.
    pub fn soft_update_from(&mut self, online: &ParamStore, tau: f64) {
        debug_assert_eq!(self.len(), online.len());
        for (t, o) in self.entries.iter_mut().zip(&online.entries) {
            for (tv, ov) in t.value.data_mut().iter_mut().zip(o.value.data()) {
                *tv += tau * (ov - *tv);
            }
        }
    }

    pub fn copy_from(&mut self, online: &ParamStore) {
        self.entries.clone_from(&online.entries);
    }

    pub fn max_abs_diff(&self, other: &ParamStore) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .flat_map(|(a, b)| a.value.data().iter().zip(b.value.data()))
            .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }
}

/// Momentum key-encoder update, applied tensor by tensor:
/// `key ← beta·key + (1 − beta)·query`.
///
/// `pairs` lists `(key, query)` tensor ids inside one store.
pub fn momentum_update(store: &mut ParamStore, pairs: &[(ParamId, ParamId)], beta: f64) -> Result<()> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!(
            "momentum coefficient must lie in [0, 1), got {beta}"
        )));
    }
    for &(k, q) in pairs {
        if store.get(k).shape() != store.get(q).shape() {
            return Err(Error::ShapeMismatch {
                what: store.name(k).to_string(),
                expected: store.get(q).shape(),
                actual: store.get(k).shape(),
            });
        }
    }
    for &(k, q) in pairs {
        let query = store.get(q).clone();
        momentum_update_tensor(store.get_mut(k), &query, beta)?;
    }
    Ok(())
}

/// Single-tensor form of [`momentum_update`].
pub fn momentum_update_tensor(key: &mut Mat, query: &Mat, beta: f64) -> Result<()> {
    if key.shape() != query.shape() {
        return Err(Error::ShapeMismatch {
            what: "momentum key tensor".into(),
            expected: query.shape(),
            actual: key.shape(),
        });
    }
    for (kv, qv) in key.data_mut().iter_mut().zip(query.data()) {
        *kv += (1.0 - beta) * (qv - *kv);
    }
    Ok(())
}
