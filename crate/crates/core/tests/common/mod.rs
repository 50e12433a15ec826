#![allow(dead_code)]

use acorm::{collect_episode, Batch, EpisodeRecord, Learner, Mat, ParamId, ParamStore};
use rand::Rng;

pub fn uniform_vec<R: Rng>(rng: &mut R, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn uniform_mat<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_vec(rows, cols, uniform_vec(rng, rows * cols, scale))
}

pub fn mat_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Overwrites the listed tensors with fresh uniform values.
pub fn randomize<R: Rng>(store: &mut ParamStore, ids: &[ParamId], scale: f64, rng: &mut R) {
    for &id in ids {
        let (r, c) = store.get(id).shape();
        store.set(id, uniform_mat(rng, r, c, scale)).unwrap();
    }
}

/// Multiplies every tensor in the store by `factor`.
pub fn scale_all(store: &mut ParamStore, factor: f64) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        store.get_mut(id).scale_assign(factor);
    }
}

/// Uniform-random (ε = 1) episodes from the learner's environment.
pub fn random_episodes(learner: &Learner, count: u64) -> Vec<EpisodeRecord> {
    (0..count)
        .map(|s| collect_episode(&learner.nets, &learner.params, &learner.config.env, 1.0, s).unwrap())
        .collect()
}

pub fn batch_of(episodes: &[EpisodeRecord]) -> Batch {
    let refs: Vec<&EpisodeRecord> = episodes.iter().collect();
    Batch::new(&refs).unwrap()
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central finite difference of `f` at `x` along coordinate `i`.
pub fn central_diff(x: &[f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += h;
    let mut xm = x.to_vec();
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}
