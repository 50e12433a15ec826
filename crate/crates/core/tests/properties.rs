mod common;

use acorm::contrastive::pair_masks;
use acorm::env::STAY;
use acorm::kmeans::canonicalize;
use acorm::{
    greedy_action, infonce_loss, kmeans, select_action, ClusterAssignment, EnvConfig, Mat, Mixer, MultiHeadAttention,
    ParamStore, Preset, RoleArena,
};
use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn preset() -> impl Strategy<Value = EnvConfig> {
    prop_oneof![Just(Preset::Default.config()), Just(Preset::Easy.config())]
}

/// Plays uniformly random available actions, checking the step invariants.
fn random_rollout(config: &EnvConfig, action_seed: u64) -> Vec<(Vec<usize>, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(action_seed);
    let (mut env, mut last) = RoleArena::reset(config, action_seed).unwrap();
    let mut steps = Vec::new();
    while !last.terminated {
        let joint: Vec<usize> = last
            .available_actions
            .iter()
            .map(|mask| {
                let avail: Vec<usize> = (0..mask.len()).filter(|&a| mask[a]).collect();
                avail[rng.random_range(0..avail.len())]
            })
            .collect();
        last = env.step(&joint).expect("masked-available actions never fail");
        for (u, max) in env
            .allies()
            .iter()
            .chain(env.enemies())
            .map(|u| (u, u.class.stats().max_health))
        {
            assert!((0..=max).contains(&u.health));
        }
        for o in &last.observations {
            assert!(o.iter().all(|x| (-1.0..=1.0).contains(x)));
        }
        for (i, mask) in last.available_actions.iter().enumerate() {
            if !env.allies()[i].alive() {
                assert!(mask[STAY] && mask.iter().filter(|&&m| m).count() == 1);
            }
        }
        steps.push((joint, last.reward));
    }
    assert!(steps.len() <= config.episode_limit);
    steps
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn env_rollouts_respect_invariants_and_replay(config in preset(), seed in any::<u64>()) {
        let a = random_rollout(&config, seed);
        let b = random_rollout(&config, seed);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn greedy_selection_never_picks_masked_actions(
        q in prop::collection::vec(-10.0f64..10.0, 1..12),
        bits in any::<u64>(),
        epsilon in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let mut mask: Vec<bool> = (0..q.len()).map(|i| bits >> i & 1 == 1).collect();
        if !mask.iter().any(|&m| m) {
            mask[0] = true;
        }
        let greedy = greedy_action(&q, &mask).unwrap();
        prop_assert!(mask[greedy]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = select_action(&q, &mask, epsilon, &mut rng).unwrap();
        prop_assert!(mask[a]);
    }

    #[test]
    fn infonce_is_non_negative_and_zero_without_negatives(
        n in 2usize..8, d in 1usize..6, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = uniform_mat(&mut rng, n, d, 2.0);
        let k = uniform_mat(&mut rng, n, d, 2.0);
        let w = uniform_mat(&mut rng, d, d, 2.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let loss = infonce_loss(&q, &k, &ClusterAssignment::from_labels(labels), &w).unwrap();
        prop_assert!(loss >= 0.0 && loss.is_finite());
        let one = infonce_loss(&q, &k, &ClusterAssignment::from_labels(vec![0; n]), &w).unwrap();
        prop_assert_eq!(one, 0.0);
    }

    #[test]
    fn pair_masks_are_consistent(labels in prop::collection::vec(0usize..4, 1..9)) {
        let n = labels.len();
        let (pos, all) = pair_masks(&labels);
        for i in 0..n {
            prop_assert!(pos[i * n..(i + 1) * n].iter().any(|&p| p));
            for j in 0..n {
                prop_assert!(!pos[i * n + j] || all[i * n + j]);
            }
        }
    }

    #[test]
    fn kmeans_partitions_every_point(
        n in 1usize..16, d in 1usize..5, k_frac in 0.0f64..1.0, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<Vec<f64>> = (0..n).map(|_| uniform_vec(&mut rng, d, 1.0)).collect();
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let a = kmeans(&points, k, seed, 50).unwrap();
        prop_assert_eq!(a.labels.len(), n);
        prop_assert!(a.labels.iter().all(|&l| l < k));
        prop_assert!(a.centroids.iter().flatten().all(|c| c.is_finite()));
        prop_assert_eq!(a.cluster_sizes().iter().sum::<usize>(), n);
        for w in a.wcss_history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
        let canon = canonicalize(&a.labels);
        prop_assert_eq!(canon[0], 0);
        prop_assert_eq!(kmeans(&points, k, seed, 50).unwrap(), a);
    }

    #[test]
    fn attention_rows_are_distributions(n in 1usize..8, heads in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let att = MultiHeadAttention::new(&mut store, 5, 4, heads, 3, 6, &mut rng);
        let tau = uniform_vec(&mut rng, 5, 3.0);
        let roles = uniform_mat(&mut rng, n, 4, 3.0);
        let out = att.attend(&store, &tau, &roles).unwrap();
        prop_assert_eq!(out.weights.shape(), (heads, n));
        for h in 0..heads {
            let row = out.weights.row(h);
            prop_assert!(row.iter().all(|&w| w >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
        let same = Mat::from_rows(&vec![roles.row(0).to_vec(); n]);
        let uniform = att.attend(&store, &tau, &same).unwrap();
        for &w in uniform.weights.data() {
            prop_assert!((w - 1.0 / n as f64).abs() <= 1e-12);
        }
    }

    #[test]
    fn mixer_is_monotone_in_each_utility(
        n in 2usize..6, seed in any::<u64>(), i_frac in 0.0f64..1.0, delta in 0.0f64..3.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mixer = Mixer::new(&mut store, n, 7, 8, 5, &mut rng);
        let q = uniform_vec(&mut rng, n, 4.0);
        let cond = uniform_vec(&mut rng, 7, 2.0);
        let i = ((n as f64 * i_frac) as usize).min(n - 1);
        let mut up = q.clone();
        up[i] += delta;
        prop_assert!(mixer.mix(&store, &up, &cond).unwrap() >= mixer.mix(&store, &q, &cond).unwrap());
    }
}
