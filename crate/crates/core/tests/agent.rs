use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rearrange::agent::*;
use rearrange::graphnet::{GnnConfig, QMatrix};
use rearrange::keypoints::{Frame, KeypointSet};
use rearrange::simenv::{RearrangeEnv, SimConfig, TaskFamily};
use rearrange::Error;

fn small_gnn(k: usize) -> GnnConfig {
    GnnConfig {
        keypoints: k,
        hidden: 8,
        embed_widths: vec![2, 8],
        update_hidden: vec![8],
        ..GnnConfig::default()
    }
}

fn small_agent(episodes: usize) -> AgentConfig {
    AgentConfig {
        episodes,
        batch_size: 8,
        warmup: 16,
        target_sync: 5,
        replay_capacity: 1000,
        ..AgentConfig::default()
    }
}

fn env(k: usize) -> RearrangeEnv {
    let sim = SimConfig {
        keypoints: k,
        ..SimConfig::default()
    };
    RearrangeEnv::new(sim, TaskFamily::Straighten).unwrap()
}

#[test]
fn full_exploration_is_uniform_over_pairs() {
    let k = 8;
    let q = QMatrix::new(k, (0..k * k).map(|i| i as f64).collect()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 100_000;
    let mut counts = vec![0usize; k * k];
    for _ in 0..n {
        let (i, j) = select_action(&q, 1.0, &mut rng);
        counts[i * k + j] += 1;
    }
    let expected = n as f64 / (k * k) as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 63 degrees of freedom; 0.999 quantile is about 103.4.
    assert!(chi2 < 103.4, "chi2 {chi2}");
}

#[test]
fn mixed_exploration_frequency() {
    let k = 4;
    let mut v = vec![0.0; k * k];
    v[5] = 1.0;
    let q = QMatrix::new(k, v).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 100_000;
    let hits = (0..n).filter(|_| select_action(&q, 0.3, &mut rng) == (1, 1)).count();
    let p = 0.7 + 0.3 / 16.0;
    let sd = (p * (1.0 - p) / n as f64).sqrt();
    assert!((hits as f64 / n as f64 - p).abs() < 5.0 * sd);
}

#[test]
fn td_target_examples() {
    let net = rearrange::graphnet::GraphNet::new(small_gnn(2), 0).unwrap();
    let s = KeypointSet::new(vec![[0.2, 0.2], [0.4, 0.4]], Frame::Current);
    let t = Transition {
        current: s.clone(),
        goal: s.clone().with_frame(Frame::Goal),
        action: (0, 1),
        reward: 0.65,
        next: s,
        terminal: true,
    };
    assert_eq!(td_target(&t, &net, 0.9).unwrap(), 0.65);
}

fn dummy(i: usize) -> Transition {
    let s = KeypointSet::new(vec![[i as f64, 0.0]], Frame::Current);
    Transition {
        current: s.clone(),
        goal: s.clone(),
        action: (0, 0),
        reward: i as f64,
        next: s,
        terminal: false,
    }
}

#[test]
fn replay_overwrites_oldest() {
    let mut buf = ReplayBuffer::new(3);
    for i in 0..5 {
        buf.push(dummy(i));
    }
    assert_eq!(buf.len(), 3);
    let mut rewards: Vec<f64> = (0..3).map(|i| buf.get(i).unwrap().reward).collect();
    rewards.sort_by(f64::total_cmp);
    assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
}

#[test]
fn replay_sampling_is_without_replacement_and_covers() {
    let n = 50;
    let mut buf = ReplayBuffer::new(n);
    for i in 0..n {
        buf.push(dummy(i));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut seen = vec![false; n];
    let mut draws = 0;
    while seen.iter().any(|s| !s) {
        let idx = buf.sample_indices(10, &mut rng).unwrap();
        let mut sorted = idx.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 10);
        idx.iter().for_each(|&i| seen[i] = true);
        draws += 1;
    }
    // Expected batches to cover 50 items drawing 10 at a time is about 21;
    // allow a generous tail.
    assert!(draws < 80, "{draws}");
    assert!(buf.sample_indices(51, &mut rng).is_err());
}

#[test]
fn short_training_run_fills_replay_with_every_step() {
    let mut e = env(4);
    let out = train(&mut e, small_agent(10), small_gnn(4), 3, |_| {}).unwrap();
    assert_eq!(out.metrics.len(), 10);
    let steps: usize = out.metrics.iter().map(|m| m.steps).sum();
    assert_eq!(out.total_steps, steps);
    assert_eq!(out.replay_len, steps);
    assert!(out.metrics.iter().all(|m| m.steps >= 1 && m.steps <= 30));
    assert!(out.agent.optimization_steps() as usize == steps.saturating_sub(15));
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let mut e = env(4);
        let out = train(&mut e, small_agent(6), small_gnn(4), 9, |_| {}).unwrap();
        let mut csv = Vec::new();
        write_metrics(&mut csv, &out.metrics).unwrap();
        (csv, out.agent.to_bytes())
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with(METRICS_HEADER));
    assert_eq!(text.lines().count(), 7);
}

#[test]
fn checkpoint_round_trip() {
    let mut e = env(4);
    let out = train(&mut e, small_agent(3), small_gnn(4), 1, |_| {}).unwrap();
    let net = Agent::network_from_bytes(small_gnn(4), &out.agent.to_bytes()).unwrap();
    let s = KeypointSet::new(vec![[0.1, 0.2], [0.3, 0.3], [0.5, 0.5], [0.7, 0.6]], Frame::Current);
    let g = s.translated([0.05, 0.1]).with_frame(Frame::Goal);
    assert_eq!(net.q_values(&s, &g).unwrap(), out.agent.online.q_values(&s, &g).unwrap());
}

#[test]
fn evaluation_rules() {
    let mut e = env(4);
    assert!(matches!(evaluate(&mut e, &mut FixedPolicy(0, 0), 0, 30), Err(Error::NoTasks)));
    let r = evaluate(&mut e, &mut FixedPolicy(0, 0), 5, 30).unwrap();
    assert_eq!(r.tasks, 5);
    assert!(r.max_steps <= 30);
    let a = evaluate(&mut e, &mut RandomPolicy::new(4, 1), 5, 30).unwrap();
    let b = evaluate(&mut e, &mut RandomPolicy::new(4, 1), 5, 30).unwrap();
    assert_eq!(a, b);
}

#[test]
fn mismatched_keypoint_count_is_rejected() {
    let mut e = env(4);
    assert!(train(&mut e, small_agent(1), small_gnn(3), 0, |_| {}).is_err());
}

#[test]
fn training_and_evaluation_tasks_are_disjoint() {
    for seed in 0..4 {
        for ep in 0..10_000 {
            assert!(train_task_seed(seed, ep) < eval_task_seed(0));
        }
    }
}
