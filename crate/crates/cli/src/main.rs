//! `rearrange` command-line entry point.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rearrange::agent::{self, evaluate, Agent, FixedPolicy, Greedy, RandomPolicy};
use rearrange::graphnet::{count_attention_pairs, AttentionMode, GnnConfig, GraphNet};
use rearrange::keypoint;
use rearrange::simenv::{self, rasterize, Environment, RearrangeEnv, RolloutRecord, TaskFamily};

use config::RunConfig;

type CmdResult = Result<(), String>;

#[derive(Parser)]
#[command(name = "rearrange", about = "Goal-conditioned deformable-object rearranging", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply to anything it omits.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render (image, keypoint) pairs; rope families unless --family is given.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of samples (default: data.train_samples).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the keypoint detector on freshly rendered rope images.
    TrainDetector(Common),
    /// Train the DQN agent on one task family.
    TrainAgent(Common),
    /// Success rates on held-out tasks with random and fixed-action baselines.
    Eval(Common),
    /// Greedy episode on one held-out task: PGM frames plus a JSON-lines log.
    Rollout(Common),
    /// Local versus global attention on the same tasks and seeds.
    Ablation(Common),
}

fn resolve(common: &Common) -> Result<RunConfig, String> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(f) = &common.family {
        cfg.family = f.clone();
    }
    if let Some(e) = common.episodes {
        cfg.agent.episodes = e;
    }
    if let Some(t) = common.tasks {
        cfg.eval.tasks = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare(common: &Common) -> Result<RunConfig, String> {
    let cfg = resolve(common)?;
    fs::create_dir_all(&common.out).map_err(|e| format!("{}: {e}", common.out.display()))?;
    write(&common.out.join("config.toml"), cfg.to_toml().as_bytes())?;
    Ok(cfg)
}

fn write(path: &Path, bytes: &[u8]) -> CmdResult {
    fs::write(path, bytes).map_err(|e| format!("{}: {e}", path.display()))
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn gen_data(common: &Common, count: Option<usize>) -> CmdResult {
    let cfg = prepare(common)?;
    let families = match &common.family {
        Some(_) => vec![cfg.family()?],
        None => vec![TaskFamily::Straighten, TaskFamily::VShape, TaskFamily::NShape],
    };
    let n = count.unwrap_or(cfg.data.train_samples);
    let samples = keypoint::render_samples(&families, n, cfg.seed, &cfg.sim, &cfg.detector).map_err(err)?;
    keypoint::write_dataset(&common.out.join("dataset"), &samples).map_err(err)?;
    println!("wrote {n} samples to {}", common.out.join("dataset").display());
    Ok(())
}

fn train_detector(common: &Common) -> CmdResult {
    let mut cfg = prepare(common)?;
    cfg.detector.seed = cfg.seed;
    let train = keypoint::rope_samples(cfg.data.train_samples, cfg.seed, &cfg.sim, &cfg.detector).map_err(err)?;
    let test = keypoint::rope_samples(cfg.data.test_samples, cfg.seed ^ 0x7e57_0000_0000, &cfg.sim, &cfg.detector).map_err(err)?;
    let (det, report) = keypoint::train_detector(&train, &cfg.detector).map_err(err)?;
    det.save(common.out.join("detector.ckpt")).map_err(err)?;
    let mut losses = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        losses.push_str(&format!("{i},{l}\n"));
    }
    write(&common.out.join("detector_losses.csv"), losses.as_bytes())?;
    let summary = format!(
        "steps {}\nelapsed_secs {:.1}\nbudget_hit {}\ntrain_error_px {:.4}\ntest_error_px {:.4}\n",
        report.steps,
        report.elapsed_secs,
        report.budget_hit,
        keypoint::mean_error(&det, &train).map_err(err)?,
        keypoint::mean_error(&det, &test).map_err(err)?,
    );
    write(&common.out.join("detector_report.txt"), summary.as_bytes())?;
    print!("{summary}");
    Ok(())
}

fn train_agent(common: &Common) -> CmdResult {
    let cfg = prepare(common)?;
    let mut env = RearrangeEnv::new(cfg.sim.clone(), cfg.family()?).map_err(err)?;
    let start = Instant::now();
    let every = (cfg.agent.episodes / 20).max(1);
    let out = agent::train(&mut env, cfg.agent.clone(), cfg.gnn.clone(), cfg.seed, |m| {
        if (m.episode + 1) % every == 0 {
            eprintln!("episode {} return {:.3} eps {:.3} ({:.0}s)", m.episode + 1, m.ret, m.epsilon, start.elapsed().as_secs_f64());
        }
    })
    .map_err(err)?;
    let mut csv = Vec::new();
    agent::write_metrics(&mut csv, &out.metrics).map_err(err)?;
    write(&common.out.join("metrics.csv"), &csv)?;
    out.agent.save(common.out.join("agent.ckpt")).map_err(err)?;
    let rets: Vec<f64> = out.metrics.iter().map(|m| m.ret).collect();
    println!(
        "trained {} episodes ({} steps); mean return by thirds {:?}",
        out.metrics.len(),
        out.total_steps,
        agent::segment_means(&rets, 3)
    );
    Ok(())
}

fn load_network(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<GraphNet, String> {
    match checkpoint {
        Some(p) => {
            let bytes = fs::read(p).map_err(|e| format!("{}: {e}", p.display()))?;
            Agent::network_from_bytes(cfg.gnn.clone(), &bytes).map_err(err)
        }
        None => GraphNet::new(cfg.gnn.clone(), cfg.seed).map_err(err),
    }
}

fn eval(common: &Common) -> CmdResult {
    let cfg = prepare(common)?;
    let net = load_network(&cfg, common.checkpoint.as_deref())?;
    let families = match &common.family {
        Some(_) => vec![cfg.family()?],
        None => TaskFamily::ALL.to_vec(),
    };
    let cap = cfg.sim.max_steps;
    let mut table = format!("{:<16}{:>7}{:>9}{:>9}{:>9}\n", "family", "tasks", "greedy", "random", "fixed");
    for family in families {
        let mut env = RearrangeEnv::new(cfg.sim.clone(), family).map_err(err)?;
        let k = env.keypoint_count();
        let tasks = cfg.eval.tasks;
        let greedy = evaluate(&mut env, &mut Greedy(&net), tasks, cap).map_err(err)?;
        let random = evaluate(&mut env, &mut RandomPolicy::new(k, cfg.seed), tasks, cap).map_err(err)?;
        let fixed = evaluate(&mut env, &mut FixedPolicy(0, 0), tasks, cap).map_err(err)?;
        table.push_str(&format!(
            "{:<16}{:>7}{:>9.3}{:>9.3}{:>9.3}\n",
            family.name(),
            greedy.tasks,
            greedy.success_rate(),
            random.success_rate(),
            fixed.success_rate()
        ));
    }
    write(&common.out.join("eval.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

/// Frame side length in pixels.
const FRAME_PX: usize = 160;

fn rollout(common: &Common) -> CmdResult {
    let cfg = prepare(common)?;
    let net = load_network(&cfg, common.checkpoint.as_deref())?;
    let mut env = RearrangeEnv::new(cfg.sim.clone(), cfg.family()?).map_err(err)?;
    let frames = common.out.join("frames");
    fs::create_dir_all(&frames).map_err(err)?;
    let mut obs = env.reset(agent::eval_task_seed(cfg.seed as usize)).map_err(err)?;
    let mut log = Vec::new();
    let record = |env: &RearrangeEnv, r: RolloutRecord, log: &mut Vec<u8>| -> CmdResult {
        let state = env.state().expect("episode started");
        let img = rasterize(state, FRAME_PX, FRAME_PX);
        let f = fs::File::create(frames.join(format!("frame_{:03}.pgm", r.step))).map_err(err)?;
        img.write_pgm(std::io::BufWriter::new(f)).map_err(err)?;
        writeln!(log, "{}", serde_json::to_string(&r).map_err(err)?).map_err(err)
    };
    let start_ok = simenv::success(&obs.current, &obs.goal, cfg.sim.success_threshold).map_err(err)?;
    let initial = RolloutRecord {
        step: 0,
        keypoints: obs.current.points.clone(),
        pick: None,
        place: None,
        reward: 0.0,
        success: start_ok,
    };
    record(&env, initial, &mut log)?;
    let mut step = 0;
    while step < cfg.sim.max_steps {
        let (p, q) = net.q_values(&obs.current, &obs.goal).map_err(err)?.argmax();
        let r = env.step(obs.current.points[p], obs.goal.points[q]).map_err(err)?;
        step += 1;
        let rec = RolloutRecord {
            step,
            keypoints: r.next_kps.points.clone(),
            pick: Some(p),
            place: Some(q),
            reward: r.reward,
            success: r.info.success,
        };
        record(&env, rec, &mut log)?;
        obs.current = r.next_kps;
        if r.terminal {
            break;
        }
    }
    write(&common.out.join("rollout.jsonl"), &log)?;
    println!("{} actions, {} frames in {}", step, step + 1, frames.display());
    Ok(())
}

fn ablation(common: &Common) -> CmdResult {
    let cfg = prepare(common)?;
    let family = cfg.family()?;
    let k = cfg.gnn.keypoints;
    let local_pairs = count_attention_pairs(k, AttentionMode::Local);
    let global_pairs = count_attention_pairs(k, AttentionMode::Global);
    let dir = common.out.join("ablation");
    fs::create_dir_all(&dir).map_err(err)?;
    let mut report = format!(
        "attention pairs per layer: local {local_pairs} global {global_pairs} ratio {}\n",
        local_pairs as f64 / global_pairs as f64
    );
    report.push_str(&format!("{:<6}{:>12}{:>12}\n", "seed", "local", "global"));
    let mut wins = 0;
    for s in 0..cfg.ablation.seeds as u64 {
        let seed = cfg.seed + s;
        let mut finals = Vec::new();
        for mode in [AttentionMode::Local, AttentionMode::Global] {
            let gnn = GnnConfig { mode, ..cfg.gnn.clone() };
            let mut env = RearrangeEnv::new(cfg.sim.clone(), family).map_err(err)?;
            let out = agent::train(&mut env, cfg.agent.clone(), gnn, seed, |_| {}).map_err(err)?;
            let mut csv = Vec::new();
            agent::write_metrics(&mut csv, &out.metrics).map_err(err)?;
            let name = if mode == AttentionMode::Local { "local" } else { "global" };
            write(&dir.join(format!("{name}_seed{seed}.csv")), &csv)?;
            let rets: Vec<f64> = out.metrics.iter().map(|m| m.ret).collect();
            finals.push(agent::final_window_mean(&rets, cfg.ablation.window));
        }
        wins += usize::from(finals[0] >= finals[1]);
        report.push_str(&format!("{seed:<6}{:>12.4}{:>12.4}\n", finals[0], finals[1]));
    }
    report.push_str(&format!("local >= global on {wins}/{} seeds\n", cfg.ablation.seeds));
    write(&common.out.join("ablation.txt"), report.as_bytes())?;
    print!("{report}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData { common, count } => gen_data(common, *count),
        Command::TrainDetector(c) => train_detector(c),
        Command::TrainAgent(c) => train_agent(c),
        Command::Eval(c) => eval(c),
        Command::Rollout(c) => rollout(c),
        Command::Ablation(c) => ablation(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
