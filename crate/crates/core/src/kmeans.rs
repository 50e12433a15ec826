//! Seeded Lloyd's K-means used to split agents into positive/negative groups.
//!
//! Initialization picks `k` distinct points with a partial Fisher–Yates
//! shuffle driven by a `ChaCha8Rng` seeded from `seed`: for `j in 0..k`, swap
//! index `j` with `rng.random_range(j..n)`, then take the first `k` indices.
//! Assignment ties go to the lowest centroid index. A cluster left empty by an
//! update step is re-seeded with the point farthest from its own centroid
//! (lowest point index among equals).

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    /// Centroid index per point.
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Lloyd iterations performed.
    pub iterations: usize,
    /// Within-cluster sum of squares after each assignment step.
    pub wcss_history: Vec<f64>,
}

impl ClusterAssignment {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    /// Labels renumbered by order of first appearance, so equal partitions
    /// compare equal regardless of centroid order.
    pub fn canonical_labels(&self) -> Vec<usize> {
        canonicalize(&self.labels)
    }

    /// Distance from each point to its assigned centroid.
    pub fn centroid_distances(&self, points: &[Vec<f64>]) -> Vec<f64> {
        points
            .iter()
            .zip(&self.labels)
            .map(|(p, &l)| sq_dist(p, &self.centroids[l]).sqrt())
            .collect()
    }

    /// A single cluster holding every point.
    pub fn single(points: &[Vec<f64>]) -> Self {
        let centroid = mean_of(points.iter());
        let wcss = points.iter().map(|p| sq_dist(p, &centroid)).sum();
        Self {
            labels: vec![0; points.len()],
            centroids: vec![centroid],
            iterations: 0,
            wcss_history: vec![wcss],
        }
    }

    pub fn from_labels(labels: Vec<usize>) -> Self {
        let k = labels.iter().max().map_or(0, |m| m + 1);
        Self {
            labels,
            centroids: vec![Vec::new(); k],
            iterations: 0,
            wcss_history: Vec::new(),
        }
    }
}

pub fn canonicalize(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn mean_of<'a>(mut points: impl Iterator<Item = &'a Vec<f64>>) -> Vec<f64> {
    let Some(first) = points.next() else { return Vec::new() };
    let mut sum = first.clone();
    let mut count = 1.0;
    for p in points {
        for (s, x) in sum.iter_mut().zip(p) {
            *s += x;
        }
        count += 1.0;
    }
    sum.iter_mut().for_each(|s| *s /= count);
    sum
}

pub fn initial_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for j in 0..k {
        let r = rng.random_range(j..n);
        idx.swap(j, r);
    }
    idx.truncate(k);
    idx
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<ClusterAssignment> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::ClusterCount { k, points: n });
    }
    let dim = points[0].len();
    if let Some(bad) = points.iter().position(|p| p.len() != dim) {
        return Err(Error::ShapeMismatch {
            what: format!("kmeans point {bad}"),
            expected: (1, dim),
            actual: (1, points[bad].len()),
        });
    }
    let mut centroids: Vec<Vec<f64>> = initial_indices(n, k, seed)
        .into_iter()
        .map(|i| points[i].clone())
        .collect();
    let mut labels: Vec<usize> = Vec::new();
    let mut wcss_history = Vec::new();
    let mut iterations = 0;

    for _ in 0..max_iters.max(1) {
        let mut new_labels = Vec::with_capacity(n);
        let mut wcss = 0.0;
        for p in points {
            let (c, d) = nearest(p, &centroids);
            new_labels.push(c);
            wcss += d;
        }
        iterations += 1;
        wcss_history.push(wcss);
        let stable = new_labels == labels;
        labels = new_labels;
        if stable {
            break;
        }
        // update step
        let mut fresh: Vec<Vec<f64>> = (0..k)
            .map(|c| mean_of(points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p)))
            .collect();
        for c in 0..k {
            if !fresh[c].is_empty() {
                continue;
            }
            let mut far = (0, f64::NEG_INFINITY);
            for (i, p) in points.iter().enumerate() {
                let own = &fresh[labels[i]];
                let d = if own.is_empty() { 0.0 } else { sq_dist(p, own) };
                if d > far.1 {
                    far = (i, d);
                }
            }
            let moved = far.0;
            fresh[c] = points[moved].clone();
            labels[moved] = c;
        }
        centroids = fresh;
    }

    Ok(ClusterAssignment {
        labels,
        centroids,
        iterations,
        wcss_history,
    })
}
