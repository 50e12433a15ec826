//! Fixtures shared by the criterion benches.

use acorm::env::Preset;
use acorm::{collect_episode, Batch, EpisodeRecord, Learner, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A freshly initialized learner plus `batch_size` ε = 1 episodes.
pub fn learner_and_episodes(preset: Preset, batch_size: usize) -> (Learner, Vec<EpisodeRecord>) {
    let mut config = TrainConfig::with_preset(preset);
    config.batch_size = batch_size;
    let learner = Learner::new(config).expect("valid preset config");
    let episodes = (0..batch_size as u64)
        .map(|s| collect_episode(&learner.nets, &learner.params, &learner.config.env, 1.0, s).expect("rollout"))
        .collect();
    (learner, episodes)
}

pub fn batch_of(episodes: &[EpisodeRecord]) -> Batch {
    let refs: Vec<&EpisodeRecord> = episodes.iter().collect();
    Batch::new(&refs).expect("non-empty batch")
}

/// `n` points of dimension `d` with entries uniform in `[-1, 1)`.
pub fn random_points(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}
