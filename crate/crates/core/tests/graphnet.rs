use diffcore::gradcheck::check_params;
use diffcore::{Array, Tape};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rearrange::graphnet::*;
use rearrange::keypoints::{Frame, KeypointSet};

fn random_set(rng: &mut ChaCha8Rng, k: usize, frame: Frame) -> KeypointSet {
    KeypointSet::new((0..k).map(|_| [rng.gen(), rng.gen()]).collect(), frame)
}

fn permuted(s: &KeypointSet, perm: &[usize]) -> KeypointSet {
    KeypointSet::new(perm.iter().map(|&i| s.points[i]).collect(), s.frame)
}

#[test]
fn q_matrix_is_permutation_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for mode in [AttentionMode::Local, AttentionMode::Global] {
        let net = GraphNet::new(GnnConfig { mode, ..GnnConfig::default() }, 7).unwrap();
        let cur = random_set(&mut rng, 8, Frame::Current);
        let goal = random_set(&mut rng, 8, Frame::Goal);
        let q = net.q_values(&cur, &goal).unwrap();
        assert!(q.values.iter().all(|v| v.is_finite()));
        for _ in 0..50 {
            let mut pi: Vec<usize> = (0..8).collect();
            let mut rho: Vec<usize> = (0..8).collect();
            pi.shuffle(&mut rng);
            rho.shuffle(&mut rng);
            let qp = net.q_values(&permuted(&cur, &pi), &permuted(&goal, &rho)).unwrap();
            for i in 0..8 {
                for j in 0..8 {
                    assert!((qp.get(i, j) - q.get(pi[i], rho[j])).abs() < 1e-9);
                }
            }
        }
    }
}

#[test]
fn self_layers_isolate_the_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = GnnConfig::default();
    let net = GraphNet::new(cfg.clone(), 1).unwrap();
    let cur = random_set(&mut rng, 8, Frame::Current);
    let g1 = random_set(&mut rng, 8, Frame::Goal);
    let g2 = random_set(&mut rng, 8, Frame::Goal);
    let a = net.node_embeddings(&cur, &g1, cfg.self_layers).unwrap();
    let b = net.node_embeddings(&cur, &g2, cfg.self_layers).unwrap();
    let half = 8 * cfg.hidden;
    assert_eq!(a.data()[..half], b.data()[..half]);
    // And the goal half ignores the current frame.
    let c2 = random_set(&mut rng, 8, Frame::Current);
    let c = net.node_embeddings(&c2, &g1, cfg.self_layers).unwrap();
    assert_eq!(a.data()[half..], c.data()[half..]);
    // A cross layer mixes them: one moved goal node changes every current node.
    let mut g3 = g1.clone();
    g3.points[4][0] += 0.05;
    let d = net.node_embeddings(&cur, &g1, cfg.self_layers + 1).unwrap();
    let e = net.node_embeddings(&cur, &g3, cfg.self_layers + 1).unwrap();
    for i in 0..8 {
        let row = |x: &Array| x.data()[i * cfg.hidden..(i + 1) * cfg.hidden].to_vec();
        assert_ne!(row(&d), row(&e), "current node {i}");
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for mode in [AttentionMode::Local, AttentionMode::Global] {
        let cfg = GnnConfig { mode, heads: 2, ..GnnConfig::default() };
        let net = GraphNet::new(cfg, 2).unwrap();
        let rows = net
            .attention_rows(&random_set(&mut rng, 8, Frame::Current), &random_set(&mut rng, 8, Frame::Goal))
            .unwrap();
        assert_eq!(rows.len(), 4 * 2);
        for layer in rows {
            assert_eq!(layer.len(), 16);
            for r in layer {
                assert_eq!(r.len(), if mode == AttentionMode::Local { 8 } else { 16 });
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn single_neighbor_message_is_its_value() {
    // With K = 1 the self layer of each node sees only itself, so the
    // attention output equals the node's own value projection.
    let cfg = GnnConfig {
        keypoints: 1,
        hidden: 4,
        embed_widths: vec![2, 4],
        update_hidden: vec![],
        ..GnnConfig::default()
    };
    let net = GraphNet::new(cfg, 4).unwrap();
    let c = KeypointSet::new(vec![[0.2, 0.7]], Frame::Current);
    let g = KeypointSet::new(vec![[0.6, 0.1]], Frame::Goal);
    let rows = net.attention_rows(&c, &g).unwrap();
    assert!(rows.iter().all(|l| l.iter().all(|r| r == &vec![1.0])));
}

#[test]
fn batched_forward_matches_single() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = GraphNet::new(GnnConfig::default(), 3).unwrap();
    let cs: Vec<_> = (0..5).map(|_| random_set(&mut rng, 8, Frame::Current)).collect();
    let gs: Vec<_> = (0..5).map(|_| random_set(&mut rng, 8, Frame::Goal)).collect();
    let batch = net.q_values_batch(&cs.iter().collect::<Vec<_>>(), &gs.iter().collect::<Vec<_>>()).unwrap();
    for i in 0..5 {
        let single = net.q_values(&cs[i], &gs[i]).unwrap();
        for (a, b) in single.values.iter().zip(&batch[i].values) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn gradient_of_q_sum_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for mode in [AttentionMode::Local, AttentionMode::Global] {
        let cfg = GnnConfig {
            keypoints: 3,
            hidden: 8,
            embed_widths: vec![2, 6, 8],
            update_hidden: vec![8],
            mode,
            ..GnnConfig::default()
        };
        let mut net = GraphNet::new(cfg, 21).unwrap();
        let cur = random_set(&mut rng, 3, Frame::Current);
        let goal = random_set(&mut rng, 3, Frame::Goal);
        let shadow = net.clone();
        let q_sum = |net: &GraphNet, tape: &mut Tape| {
            let q = net.forward_var(tape, &[&cur], &[&goal]).unwrap();
            tape.sum(q).unwrap()
        };
        let mut store = net.params().clone();
        let report = check_params(
            &mut store,
            &[],
            1e-5,
            1e-6,
            |s| {
                *net.params_mut() = s.clone();
                let mut tape = Tape::new();
                let l = q_sum(&net, &mut tape);
                tape.backward(l, s)?;
                Ok(())
            },
            |s| {
                let mut probe = shadow.clone();
                *probe.params_mut() = s.clone();
                let mut tape = Tape::inference();
                let l = q_sum(&probe, &mut tape);
                Ok(tape.value(l).data()[0])
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{mode:?}: {report:?}");
        assert_eq!(report.checked, net.params().scalar_count());
    }
}
