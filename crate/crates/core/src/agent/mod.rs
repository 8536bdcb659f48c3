//! DQN over the graph network's pick × place Q matrix.

mod replay;

use std::io::Write;

use diffcore::{Array, Optimizer, Real, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use replay::ReplayBuffer;

use crate::error::{Error, Result};
use crate::graphnet::{GnnConfig, GraphNet, QMatrix};
use crate::keypoints::KeypointSet;
use crate::simenv::{Environment, Observation, DEFAULT_MAX_STEPS};

/// Namespace of agent parameters inside checkpoints.
pub const PARAM_PREFIX: &str = "agent/";

/// Offset separating held-out evaluation task seeds from training seeds.
pub const EVAL_SEED_BASE: u64 = 0xE7A1_0000_0000_0000;

pub fn eval_task_seed(i: usize) -> u64 {
    EVAL_SEED_BASE + i as u64
}

pub fn train_task_seed(run_seed: u64, episode: usize) -> u64 {
    (run_seed << 24) + episode as u64
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub current: KeypointSet,
    pub goal: KeypointSet,
    /// (pick index into `current`, place index into `goal`).
    pub action: (usize, usize),
    pub reward: f64,
    pub next: KeypointSet,
    pub terminal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub gamma: f64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    /// Transitions collected before optimization starts.
    pub warmup: usize,
    /// Optimization steps between hard target-network syncs.
    pub target_sync: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of training episodes over which epsilon decays linearly.
    pub epsilon_decay_fraction: f64,
    pub episodes: usize,
    pub max_steps: usize,
    pub learning_rate: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            gamma: 0.5,
            replay_capacity: 20_000,
            batch_size: 32,
            warmup: 500,
            target_sync: 200,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.6,
            episodes: 2000,
            max_steps: DEFAULT_MAX_STEPS,
            learning_rate: 1e-3,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must be in [0, 1)");
        }
        let unit = 0.0..=1.0;
        if !unit.contains(&self.epsilon_start) || !unit.contains(&self.epsilon_end) || !unit.contains(&self.epsilon_decay_fraction) {
            return bad("epsilon settings must be in [0, 1]");
        }
        if self.batch_size == 0 || self.replay_capacity < self.batch_size || self.target_sync == 0 {
            return bad("batch size, replay capacity and sync interval must be positive and consistent");
        }
        if self.max_steps == 0 || self.max_steps > DEFAULT_MAX_STEPS {
            return bad("episodes allow at most 30 actions");
        }
        Ok(())
    }

    /// Linear decay from `epsilon_start` to `epsilon_end` over the first
    /// `epsilon_decay_fraction` of episodes, then constant.
    pub fn epsilon(&self, episode: usize) -> f64 {
        let decay = (self.epsilon_decay_fraction * self.episodes as f64).round();
        if decay <= 0.0 {
            return self.epsilon_end;
        }
        let t = (episode as f64 / decay).min(1.0);
        self.epsilon_start + t * (self.epsilon_end - self.epsilon_start)
    }
}

/// ε-greedy choice over a Q matrix. One uniform draw decides exploration;
/// exploring draws a uniform pair, otherwise the argmax (lowest row-major
/// index on ties) is taken.
pub fn select_action(q: &QMatrix, epsilon: f64, rng: &mut impl Rng) -> (usize, usize) {
    explore(q.k, epsilon, rng).unwrap_or_else(|| q.argmax())
}

/// The exploration half of [`select_action`]: `Some` random pair with probability `epsilon`.
fn explore(k: usize, epsilon: f64, rng: &mut impl Rng) -> Option<(usize, usize)> {
    if rng.gen::<f64>() < epsilon {
        let a = rng.gen_range(0..k * k);
        Some((a / k, a % k))
    } else {
        None
    }
}

/// `r` for terminal transitions, else `r + γ·max Q_target(next, goal)`.
pub fn td_target(t: &Transition, target: &GraphNet, gamma: f64) -> Result<f64> {
    if t.terminal {
        return Ok(t.reward);
    }
    Ok(t.reward + gamma * target.q_values(&t.next, &t.goal)?.max())
}

fn td_targets(batch: &[&Transition], target: &GraphNet, gamma: f64) -> Result<Vec<f64>> {
    let live: Vec<&Transition> = batch.iter().copied().filter(|t| !t.terminal).collect();
    let mut next_max = Vec::new();
    if !live.is_empty() {
        let next: Vec<_> = live.iter().map(|t| &t.next).collect();
        let goal: Vec<_> = live.iter().map(|t| &t.goal).collect();
        next_max = target.q_values_batch(&next, &goal)?.iter().map(QMatrix::max).collect();
    }
    let mut it = next_max.into_iter();
    Ok(batch
        .iter()
        .map(|t| {
            if t.terminal {
                t.reward
            } else {
                t.reward + gamma * it.next().expect("one value per live transition")
            }
        })
        .collect())
}

/// Mean squared TD error; targets are constants so only `online` receives gradients.
pub fn td_loss(tape: &mut Tape, batch: &[&Transition], online: &GraphNet, target: &GraphNet, gamma: f64) -> Result<diffcore::Var> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let k = online.config().keypoints;
    if let Some(t) = batch.iter().find(|t| t.action.0 >= k || t.action.1 >= k) {
        return Err(Error::Config(format!("action {:?} outside a {k}x{k} Q matrix", t.action)));
    }
    let y = td_targets(batch, target, gamma)?;
    let cur: Vec<_> = batch.iter().map(|t| &t.current).collect();
    let goal: Vec<_> = batch.iter().map(|t| &t.goal).collect();
    let q = online.forward_var(tape, &cur, &goal)?;
    let idx: Vec<usize> = batch
        .iter()
        .enumerate()
        .map(|(b, t)| b * k * k + t.action.0 * k + t.action.1)
        .collect();
    let chosen = tape.gather(q, &idx)?;
    let y = tape.constant(Array::vector(y.into_iter().map(|v| v as Real).collect()))?;
    let d = tape.sub(y, chosen)?;
    let sq = tape.square(d)?;
    Ok(tape.mean(sq)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub ret: f64,
    pub steps: usize,
    pub success: bool,
    pub epsilon: f64,
}

pub const METRICS_HEADER: &str = "episode,return,steps,success,epsilon";

impl EpisodeMetrics {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{},{}", self.episode, self.ret, self.steps, u8::from(self.success), self.epsilon)
    }
}

pub fn write_metrics(mut out: impl Write, metrics: &[EpisodeMetrics]) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for m in metrics {
        writeln!(out, "{}", m.csv_line())?;
    }
    Ok(())
}

/// Online and target networks plus the optimizer state.
#[derive(Clone, Debug)]
pub struct Agent {
    pub config: AgentConfig,
    pub online: GraphNet,
    pub target: GraphNet,
    optimizer: Optimizer,
    optimization_steps: u64,
}

impl Agent {
    pub fn new(config: AgentConfig, gnn: GnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let online = GraphNet::new(gnn, seed)?;
        let target = online.clone();
        Ok(Agent {
            optimizer: Optimizer::adam(config.learning_rate as Real),
            config,
            online,
            target,
            optimization_steps: 0,
        })
    }

    pub fn optimization_steps(&self) -> u64 {
        self.optimization_steps
    }

    pub fn greedy(&self, obs: &Observation) -> Result<(usize, usize)> {
        Ok(self.online.q_values(&obs.current, &obs.goal)?.argmax())
    }

    /// One gradient step on a replay batch; syncs the target network on schedule.
    pub fn optimize(&mut self, batch: &[&Transition]) -> Result<f64> {
        let mut tape = Tape::new();
        let loss = td_loss(&mut tape, batch, &self.online, &self.target, self.config.gamma)?;
        let value = tape.value(loss).data()[0] as f64;
        tape.backward(loss, self.online.params_mut())?;
        self.optimizer.step(self.online.params_mut())?;
        self.optimization_steps += 1;
        if self.optimization_steps % self.config.target_sync as u64 == 0 {
            self.target.params_mut().copy_values_from(self.online.params())?;
        }
        Ok(value)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let entries: Vec<(String, &Array)> = self
            .online
            .params()
            .iter()
            .map(|(_, p)| (format!("{PARAM_PREFIX}{}", p.name), &p.value))
            .collect();
        let mut out = Vec::new();
        diffcore::checkpoint::write_entries(&mut out, entries.iter().map(|(n, a)| (n.as_str(), *a)))
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Loads an online network for inference from checkpoint bytes.
    pub fn network_from_bytes(gnn: GnnConfig, bytes: &[u8]) -> Result<GraphNet> {
        let mut net = GraphNet::new(gnn, 0)?;
        let entries = diffcore::checkpoint::read_entries(bytes)?;
        diffcore::checkpoint::load_into(net.params_mut(), &entries, PARAM_PREFIX)?;
        Ok(net)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub agent: Agent,
    pub metrics: Vec<EpisodeMetrics>,
    pub replay_len: usize,
    pub total_steps: usize,
}

/// Runs `config.episodes` ε-greedy episodes, optimizing once per environment
/// step after warmup. Deterministic given `seed`.
pub fn train<E: Environment>(
    env: &mut E,
    config: AgentConfig,
    gnn: GnnConfig,
    seed: u64,
    mut on_episode: impl FnMut(&EpisodeMetrics),
) -> Result<TrainOutcome> {
    if gnn.keypoints != env.keypoint_count() {
        return Err(Error::KeypointMismatch {
            left: gnn.keypoints,
            right: env.keypoint_count(),
        });
    }
    let mut agent = Agent::new(config.clone(), gnn, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa9e7_5eed);
    let mut replay = ReplayBuffer::new(config.replay_capacity);
    let k = env.keypoint_count();
    let max_steps = config.max_steps.min(env.max_steps());
    let mut metrics = Vec::with_capacity(config.episodes);
    let mut total_steps = 0;
    for episode in 0..config.episodes {
        let epsilon = config.epsilon(episode);
        let obs = env.reset(train_task_seed(seed, episode))?;
        let goal = obs.goal.clone();
        let mut current = obs.current;
        let (mut ret, mut steps, mut success) = (0.0, 0, false);
        while steps < max_steps {
            let action = match explore(k, epsilon, &mut rng) {
                Some(a) => a,
                None => agent.online.q_values(&current, &goal)?.argmax(),
            };
            let result = env.step(current.points[action.0], goal.points[action.1])?;
            steps += 1;
            ret += result.reward;
            let terminal = result.terminal || steps >= max_steps;
            success = result.info.success;
            replay.push(Transition {
                current: current.clone(),
                goal: goal.clone(),
                action,
                reward: result.reward,
                next: result.next_kps.clone(),
                terminal,
            });
            current = result.next_kps;
            total_steps += 1;
            if replay.len() >= config.warmup.max(config.batch_size) {
                let batch = replay.sample(config.batch_size, &mut rng)?;
                agent.optimize(&batch)?;
            }
            if terminal {
                break;
            }
        }
        let m = EpisodeMetrics {
            episode,
            ret,
            steps,
            success,
            epsilon,
        };
        on_episode(&m);
        metrics.push(m);
    }
    Ok(TrainOutcome {
        agent,
        replay_len: replay.len(),
        metrics,
        total_steps,
    })
}

/// Chooses `(pick, place)` indices from an observation.
pub trait Policy {
    fn act(&mut self, obs: &Observation) -> Result<(usize, usize)>;
}

pub struct Greedy<'a>(pub &'a GraphNet);

impl Policy for Greedy<'_> {
    fn act(&mut self, obs: &Observation) -> Result<(usize, usize)> {
        Ok(self.0.q_values(&obs.current, &obs.goal)?.argmax())
    }
}

/// Uniform over all `K²` pairs.
pub struct RandomPolicy {
    pub rng: ChaCha8Rng,
    pub k: usize,
}

impl RandomPolicy {
    pub fn new(k: usize, seed: u64) -> Self {
        RandomPolicy {
            rng: ChaCha8Rng::seed_from_u64(seed),
            k,
        }
    }
}

impl Policy for RandomPolicy {
    fn act(&mut self, _: &Observation) -> Result<(usize, usize)> {
        Ok(explore(self.k, 1.0, &mut self.rng).expect("epsilon 1 always explores"))
    }
}

/// Always the same pair.
pub struct FixedPolicy(pub usize, pub usize);

impl Policy for FixedPolicy {
    fn act(&mut self, _: &Observation) -> Result<(usize, usize)> {
        Ok((self.0, self.1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: usize,
    pub successes: usize,
    pub mean_return: f64,
    pub mean_steps: f64,
    /// Largest episode length observed.
    pub max_steps: usize,
}

impl EvalReport {
    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.tasks as f64
    }
}

/// Rolls `policy` out on the held-out tasks `0..tasks`, at most `max_steps` actions each.
pub fn evaluate<E: Environment>(env: &mut E, policy: &mut impl Policy, tasks: usize, max_steps: usize) -> Result<EvalReport> {
    if tasks == 0 {
        return Err(Error::NoTasks);
    }
    let cap = max_steps.min(env.max_steps());
    let mut report = EvalReport {
        tasks,
        successes: 0,
        mean_return: 0.0,
        mean_steps: 0.0,
        max_steps: 0,
    };
    for i in 0..tasks {
        let mut obs = env.reset(eval_task_seed(i))?;
        let (mut ret, mut steps) = (0.0, 0);
        while steps < cap {
            let (p, q) = policy.act(&obs)?;
            let r = env.step(obs.current.points[p], obs.goal.points[q])?;
            steps += 1;
            ret += r.reward;
            if r.info.success {
                report.successes += 1;
            }
            obs.current = r.next_kps;
            if r.terminal {
                break;
            }
        }
        report.mean_return += ret / tasks as f64;
        report.mean_steps += steps as f64 / tasks as f64;
        report.max_steps = report.max_steps.max(steps);
    }
    Ok(report)
}

/// Mean of the last `window` values of `returns`.
pub fn final_window_mean(returns: &[f64], window: usize) -> f64 {
    let w = window.clamp(1, returns.len().max(1));
    let tail = &returns[returns.len().saturating_sub(w)..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

/// Mean episode return in each of `parts` consecutive equal slices.
pub fn segment_means(returns: &[f64], parts: usize) -> Vec<f64> {
    let n = returns.len();
    (0..parts)
        .map(|p| {
            let s = &returns[p * n / parts..(p + 1) * n / parts];
            s.iter().sum::<f64>() / s.len().max(1) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keypoints::Frame;

    #[test]
    fn epsilon_schedule() {
        let c = AgentConfig {
            episodes: 100,
            ..AgentConfig::default()
        };
        assert_eq!(c.epsilon(0), 1.0);
        assert!((c.epsilon(60) - 0.05).abs() < 1e-12);
        assert_eq!(c.epsilon(99), c.epsilon(60));
        for e in 1..100 {
            assert!(c.epsilon(e) <= c.epsilon(e - 1));
        }
    }

    #[test]
    fn greedy_selection_and_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut v = vec![0.0; 64];
        v[2 * 8 + 5] = 3.0;
        let q = QMatrix::new(8, v).unwrap();
        assert_eq!(select_action(&q, 0.0, &mut rng), (2, 5));
        let flat = QMatrix::new(8, vec![1.0; 64]).unwrap();
        assert_eq!(select_action(&flat, 0.0, &mut rng), (0, 0));
        // Positive affine maps keep the argmax.
        let moved = QMatrix::new(8, q.values.iter().map(|x| 2.5 * x - 7.0).collect()).unwrap();
        assert_eq!(moved.argmax(), q.argmax());
    }

    fn transition(reward: f64, terminal: bool) -> Transition {
        let s = KeypointSet::new(vec![[0.1, 0.2], [0.3, 0.4], [0.5, 0.5]], Frame::Current);
        Transition {
            current: s.clone(),
            goal: s.translated([0.1, 0.0]).with_frame(Frame::Goal),
            action: (1, 2),
            reward,
            next: s.translated([0.05, 0.0]),
            terminal,
        }
    }

    fn small_gnn() -> GnnConfig {
        GnnConfig {
            keypoints: 3,
            hidden: 8,
            embed_widths: vec![2, 8],
            update_hidden: vec![8],
            ..GnnConfig::default()
        }
    }

    #[test]
    fn targets() {
        let net = GraphNet::new(small_gnn(), 0).unwrap();
        assert_eq!(td_target(&transition(1.0, true), &net, 0.9).unwrap(), 1.0);
        assert_eq!(td_target(&transition(0.3, false), &net, 0.0).unwrap(), 0.3);
        let t = transition(0.2, false);
        let m = net.q_values(&t.next, &t.goal).unwrap().max();
        assert!((td_target(&t, &net, 0.9).unwrap() - (0.2 + 0.9 * m)).abs() < 1e-15);
    }

    #[test]
    fn single_transition_loss_matches_hand_computation() {
        let online = GraphNet::new(small_gnn(), 1).unwrap();
        let target = GraphNet::new(small_gnn(), 2).unwrap();
        let t = transition(0.2, false);
        let mut tape = Tape::new();
        let l = td_loss(&mut tape, &[&t], &online, &target, 0.9).unwrap();
        let y = 0.2 + 0.9 * target.q_values(&t.next, &t.goal).unwrap().max();
        let q = online.q_values(&t.current, &t.goal).unwrap().get(1, 2);
        assert!((tape.value(l).data()[0] - (y - q).powi(2)).abs() < 1e-12);
        assert!(matches!(td_loss(&mut Tape::new(), &[], &online, &target, 0.9), Err(Error::EmptyBatch)));
    }

    #[test]
    fn loss_is_zero_when_online_matches_targets() {
        let online = GraphNet::new(small_gnn(), 1).unwrap();
        let t = transition(0.0, true);
        // Terminal target is r = Q_online(s, a) when r is set to that value.
        let q = online.q_values(&t.current, &t.goal).unwrap().get(1, 2);
        let t = Transition { reward: q, ..t };
        let mut tape = Tape::new();
        let l = td_loss(&mut tape, &[&t], &online, &online, 0.9).unwrap();
        assert!(tape.value(l).data()[0] < 1e-24);
    }

    #[test]
    fn window_helpers() {
        let r: Vec<f64> = (0..9).map(|x| x as f64).collect();
        assert_eq!(segment_means(&r, 3), vec![1.0, 4.0, 7.0]);
        assert_eq!(final_window_mean(&r, 2), 7.5);
    }
}
