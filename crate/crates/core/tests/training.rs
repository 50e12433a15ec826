mod common;

use acorm::checkpoint;
use acorm::config::{TrainConfig, Variant};
use acorm::harness;
use acorm::trainer::{MetricsLog, METRICS_FILE};
use acorm::{
    evaluate, Batch, EpisodeRecord, Learner, Mat, MultiHeadAttention, ParamId, ParamStore, Preset, ReplayBuffer,
    RoleArena, Trainer,
};
use common::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn easy(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::with_preset(Preset::Easy);
    c.seed = seed;
    c
}

#[test]
fn padding_changes_no_loss_or_update() {
    let learner = Learner::new(easy(0)).unwrap();
    let episodes = random_episodes(&learner, 3);
    let refs: Vec<&EpisodeRecord> = episodes.iter().collect();
    let tight = Batch::new(&refs).unwrap();
    let loose = Batch::padded(&refs, tight.steps + 5).unwrap();
    assert_eq!(loose.steps, tight.steps + 5);

    assert_eq!(learner.td_loss(&tight).unwrap(), learner.td_loss(&loose).unwrap());
    let q_tight = learner.q_tot(&tight).unwrap();
    let q_loose = learner.q_tot(&loose).unwrap();
    assert_eq!(q_tight[..], q_loose[..q_tight.len()]);

    let (mut a, mut b) = (learner.clone(), learner.clone());
    let sa = a.td_update(&tight, 1.0).unwrap();
    let sb = b.td_update(&loose, 1.0).unwrap();
    assert_eq!(sa, sb);
    assert_eq!(a.params.max_abs_diff(&b.params), 0.0);

    let ca = a.contrastive_update(&tight, 1.0, None).unwrap();
    let cb = b.contrastive_update(&loose, 1.0, None).unwrap();
    assert_eq!(ca, cb);
    assert_eq!(a.params.max_abs_diff(&b.params), 0.0);
}

#[test]
fn td_loss_examples() {
    let mut c = easy(1);
    c.gamma = 0.0;
    let mut learner = Learner::new(c).unwrap();
    let mut episodes = random_episodes(&learner, 2);
    for e in &mut episodes {
        e.rewards.iter_mut().for_each(|r| *r = 0.0);
    }
    let ids: Vec<ParamId> = learner.params.ids().collect();
    learner.params.fill(&ids, 0.0);
    learner.target.fill(&ids, 0.0);
    assert_eq!(learner.td_loss(&batch_of(&episodes)).unwrap(), 0.0);

    let learner = Learner::new({
        let mut c = easy(2);
        c.gamma = 0.0;
        c
    })
    .unwrap();
    let (mut env, first) = RoleArena::reset(&learner.config.env, 0).unwrap();
    let joint = vec![acorm::env::STAY; learner.config.env.n_agents()];
    let r = env.step(&joint).unwrap();
    let mut record = EpisodeRecord::start(&first, learner.config.env.n_actions(), 0);
    record.push(&joint, &r);
    record.rewards[0] = 1.0;
    let batch = batch_of(&[record]);
    let q = learner.q_tot(&batch).unwrap()[0];
    let loss = learner.td_loss(&batch).unwrap();
    assert!(
        (loss - (q - 1.0).powi(2)).abs() <= 1e-15,
        "{loss} vs {}",
        (q - 1.0).powi(2)
    );
}

#[test]
fn target_gap_shrinks_by_one_minus_tau() {
    let online = Learner::new(easy(3)).unwrap().params;
    let mut target = Learner::new(easy(4)).unwrap().params;
    let before = target.max_abs_diff(&online);
    target.soft_update_from(&online, 0.005);
    let after = target.max_abs_diff(&online);
    assert!(
        (after - 0.995 * before).abs() <= 1e-12 * before,
        "{after} vs {}",
        0.995 * before
    );
}

#[test]
fn buffer_drops_the_oldest_episode() {
    let learner = Learner::new(easy(0)).unwrap();
    let episodes = random_episodes(&learner, 5);
    let mut buffer = ReplayBuffer::new(4);
    for e in &episodes {
        buffer.push(e.clone());
    }
    assert_eq!(buffer.len(), 4);
    assert!(buffer.iter().all(|e| e.episode_seed != episodes[0].episode_seed));
    assert_eq!(buffer.iter().next().unwrap().episode_seed, episodes[1].episode_seed);
}

#[test]
fn attention_matches_hand_computation() {
    let mut store = ParamStore::new();
    let att = MultiHeadAttention::new(&mut store, 2, 2, 1, 2, 2, &mut ChaCha8Rng::seed_from_u64(0));
    let m = |rows: &[[f64; 2]; 2]| Mat::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>());
    store.set(att.heads[0].query, m(&[[1.0, 0.0], [0.0, 1.0]])).unwrap();
    store.set(att.heads[0].key, m(&[[1.0, 0.0], [0.0, 2.0]])).unwrap();
    store.set(att.heads[0].value, m(&[[1.0, 1.0], [0.0, 1.0]])).unwrap();
    store.set(att.output, m(&[[1.0, 0.0], [0.0, -1.0]])).unwrap();
    let tau = [1.0, 0.5];
    let roles = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
    let out = att.attend(&store, &tau, &roles).unwrap();

    // q = (1, 0.5); keys (1,0), (0,2), (1,2); logits (1, 1, 2)/√2.
    let s = 1.0 / 2f64.sqrt();
    let z = 2.0 * s.exp() + (2.0 * s).exp();
    let alpha = [s.exp() / z, s.exp() / z, (2.0 * s).exp() / z];
    // values (1,1), (0,1), (1,2); W^O flips the second coordinate.
    let head = [alpha[0] + alpha[2], alpha[0] + alpha[1] + 2.0 * alpha[2]];
    let expected = [head[0], -head[1]];
    for (got, want) in out.weights.row(0).iter().zip(alpha) {
        assert!((got - want).abs() <= 1e-15);
    }
    for (got, want) in out.tau_mha.iter().zip(expected) {
        assert!((got - want).abs() <= 1e-15);
    }
}

#[test]
fn single_cluster_contrastive_step_is_a_no_op() {
    let mut c = easy(5);
    c.cluster_k = 1;
    let mut learner = Learner::new(c).unwrap();
    let batch = batch_of(&random_episodes(&learner, 4));
    let before = learner.params.clone();
    let stats = learner.contrastive_update(&batch, 1.0, None).unwrap();
    assert_eq!(stats.loss, 0.0);
    assert!(stats.labels.iter().all(|l| l.iter().all(|&x| x == 0)));
    assert_eq!(learner.params.max_abs_diff(&before), 0.0);
}

#[test]
fn zero_learning_rate_repeats_the_contrastive_loss() {
    let mut learner = Learner::new(easy(6)).unwrap();
    let batch = batch_of(&random_episodes(&learner, 4));
    let a = learner.contrastive_update(&batch, 0.0, None).unwrap();
    let b = learner.contrastive_update(&batch, 0.0, None).unwrap();
    assert_eq!(a.loss, b.loss);
    assert_eq!(a.labels, b.labels);
    assert!(a.loss > 0.0);
}

#[test]
fn key_encoder_receives_no_gradient() {
    let learner = Learner::new(easy(7)).unwrap();
    let managed = learner.contrastive_optimizer.managed().to_vec();
    let td_managed = learner.td_optimizer.managed().to_vec();
    for (k, _) in learner.nets.roles.key_query_pairs() {
        assert!(!managed.contains(&k) && !td_managed.contains(&k));
    }
}

#[test]
fn qmix_update_leaves_role_and_attention_parameters_alone() {
    let mut c = easy(8);
    Variant::Qmix.apply(&mut c);
    let mut learner = Learner::new(c).unwrap();
    let batch = batch_of(&random_episodes(&learner, 4));
    let before = learner.params.clone();
    learner.td_update(&batch, 1.0).unwrap();
    let mut unused: Vec<ParamId> = learner.nets.attention.params();
    unused.extend(learner.nets.roles.trainable_params());
    unused.extend(learner.nets.state_encoder.params());
    for id in unused {
        assert_eq!(learner.params.get(id), before.get(id), "{}", learner.params.name(id));
    }
    assert!(learner.params.max_abs_diff(&before) > 0.0);
}

fn continue_for(trainer: &mut Trainer, episodes: usize) -> Vec<u8> {
    let mut log = MetricsLog::new(Vec::new(), trainer.config()).unwrap();
    for _ in 0..episodes {
        trainer.step_episode(&mut log).unwrap();
    }
    log.into_inner()
}

#[test]
fn checkpoint_resume_is_bit_identical() {
    let mut c = easy(9);
    c.total_env_steps = 400;
    c.contrastive_interval = 5;
    c.evaluate_interval = 200;
    c.evaluate_episodes = 2;
    let (mut original, _) = acorm::train(c, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("resume.ckpt");
    checkpoint::save(&path, &original, true).unwrap();
    let mut restored = checkpoint::load(&path).unwrap();
    assert_eq!(
        checkpoint::to_bytes(&restored, true).unwrap(),
        checkpoint::to_bytes(&original, true).unwrap()
    );

    let a = continue_for(&mut original, 30);
    let b = continue_for(&mut restored, 30);
    assert_eq!(a, b);
    assert_eq!(original.learner.params.max_abs_diff(&restored.learner.params), 0.0);
    assert_eq!(original.learner.target.max_abs_diff(&restored.learner.target), 0.0);
    assert!(original.learner.contrastive_updates > 0);
}

#[test]
fn manifest_rerun_reproduces_metrics() {
    let mut c = easy(10);
    c.total_env_steps = 300;
    c.contrastive_interval = 5;
    c.evaluate_interval = 150;
    c.evaluate_episodes = 2;
    let dir = tempfile::tempdir().unwrap();
    let first = harness::train_seeds("train", &c, &[10], &dir.path().join("a")).unwrap();
    let manifest = first[0].dir.join(harness::MANIFEST_FILE);
    let again = harness::rerun_manifest(&manifest, &dir.path().join("b")).unwrap();
    let read = |d: &std::path::Path| std::fs::read(d.join(METRICS_FILE)).unwrap();
    assert_eq!(read(&first[0].dir), read(&again[0].dir));
    let m = harness::RunManifest::read(&manifest).unwrap();
    assert_eq!(m.config, c);
    assert_eq!(m.code_hash, harness::CODE_HASH);
}

#[test]
fn evaluation_is_repeatable() {
    let learner = Learner::new(easy(11)).unwrap();
    let run = || evaluate(&learner.nets, &learner.params, &learner.config.env, 4, 17).unwrap();
    assert_eq!(run(), run());
}

/// Share of freshly initialized greedy policies that win on the default
/// preset, over init seeds `0..seeds`.
fn random_init_win_share(seeds: u64) -> f64 {
    let wins: f64 = (0..seeds)
        .map(|s| {
            let mut c = TrainConfig::with_preset(Preset::Default);
            c.seed = s;
            let l = Learner::new(c).unwrap();
            evaluate(&l.nets, &l.params, &l.config.env, 2, 0).unwrap().win_rate
        })
        .sum();
    wins / seeds as f64
}

#[test]
fn random_init_policies_rarely_win_the_default_preset() {
    let share = random_init_win_share(40);
    assert!(share <= 0.1, "random-init win share {share}");
}
