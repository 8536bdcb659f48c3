use rearrange::agent::*;
use rearrange::graphnet::GnnConfig;
use rearrange::simenv::*;
use std::time::Instant;

fn var<T: std::str::FromStr>(k: &str, d: T) -> T {
    std::env::var(k).ok().and_then(|s| s.parse().ok()).unwrap_or(d)
}

#[test]
#[ignore]
fn agent_probe() {
    let eps: usize = var("EPS", 300);
    let hidden: usize = var("HID", 64);
    let fam: TaskFamily = std::env::var("FAM").unwrap_or("straighten".into()).parse().unwrap();
    let mode = if std::env::var("GLOBAL").is_ok() { rearrange::graphnet::AttentionMode::Global } else { rearrange::graphnet::AttentionMode::Local };
    let seed: u64 = var("SEED", 0);
    let mut env = RearrangeEnv::new(SimConfig::default(), fam).unwrap();
    let cfg = AgentConfig {
        episodes: eps,
        batch_size: var("BATCH", 64),
        learning_rate: var("LR", 1e-3),
        target_sync: var("SYNC", 200),
        epsilon_decay_fraction: var("DECAY", 0.6),
        gamma: var("GAMMA", 0.9),
        ..AgentConfig::default()
    };
    let gnn = GnnConfig { hidden, embed_widths: vec![2, 32, hidden], update_hidden: vec![hidden], mode, ..GnnConfig::default() };
    let t0 = Instant::now();
    let out = train(&mut env, cfg, gnn, seed, |m| if m.episode % 100 == 99 { eprintln!("ep {} t {:.0}s", m.episode, t0.elapsed().as_secs_f64()) }).unwrap();
    let tag = std::env::var("TAG").unwrap_or("probe".into());
    out.agent.save(format!("/tmp/{tag}.ckpt")).unwrap();
    let rets: Vec<f64> = out.metrics.iter().map(|m| m.ret).collect();
    let succ: Vec<f64> = out.metrics.iter().map(|m| m.success as u8 as f64).collect();
    eprintln!("time {:.1}s steps {} thirds {:?} succ-tenths {:?} final {:.3}", t0.elapsed().as_secs_f64(), out.total_steps, segment_means(&rets, 3), segment_means(&succ, 10), final_window_mean(&rets, eps / 10));
    let net = &out.agent.online;
    let (mut diag, mut total, mut repeats, mut succ) = (0, 0, 0, 0);
    for i in 0..100 {
        let mut obs = env.reset(eval_task_seed(i)).unwrap();
        let mut last = None;
        for _ in 0..30 {
            let a = net.q_values(&obs.current, &obs.goal).unwrap().argmax();
            diag += (a.0 == a.1) as usize;
            total += 1;
            repeats += (Some(a) == last) as usize;
            last = Some(a);
            let r = env.step(obs.current.points[a.0], obs.goal.points[a.1]).unwrap();
            obs.current = r.next_kps;
            if r.info.success { succ += 1; }
            if r.terminal { break; }
        }
    }
    eprintln!("greedy succ {succ} diag {:.3} repeat {:.3}", diag as f64 / total as f64, repeats as f64 / total as f64);
}

#[test]
#[ignore]
fn stuck_probe() {
    let tag = std::env::var("TAG").unwrap_or("b32lr1".into());
    let net = Agent::network_from_bytes(GnnConfig::default(), &std::fs::read(format!("/tmp/{tag}.ckpt")).unwrap()).unwrap();
    let mut env = RearrangeEnv::new(SimConfig::default(), TaskFamily::Straighten).unwrap();
    let mut shown = 0;
    for i in 0..100 {
        let mut obs = env.reset(eval_task_seed(i)).unwrap();
        let mut trace = vec![];
        let mut ok = false;
        for _ in 0..30 {
            let q = net.q_values(&obs.current, &obs.goal).unwrap();
            let a = q.argmax();
            let d = rearrange::keypoints::dist(obs.current.points[a.0], obs.goal.points[a.1]);
            let r = env.step(obs.current.points[a.0], obs.goal.points[a.1]).unwrap();
            trace.push(format!("({},{}) q={:.3} move={:.3} r={:.3} md={:.3}", a.0, a.1, q.max(), d, r.reward, r.info.mean_distance));
            obs.current = r.next_kps;
            if r.info.success { ok = true; }
            if r.terminal { break; }
        }
        if !ok && shown < 4 {
            shown += 1;
            eprintln!("task {i}:");
            for t in trace.iter().take(8) { eprintln!("  {t}"); }
            let q = net.q_values(&obs.current, &obs.goal).unwrap();
            for p in 0..8 {
                eprintln!("  row {p}: {}", (0..8).map(|j| format!("{:6.2}", q.get(p, j))).collect::<Vec<_>>().join(" "));
            }
            // what the heuristic would get now
            let far = (0..8).max_by(|&a, &b| rearrange::keypoints::dist(obs.current.points[a], obs.goal.points[a]).total_cmp(&rearrange::keypoints::dist(obs.current.points[b], obs.goal.points[b]))).unwrap();
            eprintln!("  heuristic pick {far} dist {:.3}", rearrange::keypoints::dist(obs.current.points[far], obs.goal.points[far]));
        }
    }
}
