//! 2D position-based deformable-object simulator with pick-and-place actions.

mod dynamics;
mod render;
mod state;
mod tasks;

use serde::{Deserialize, Serialize};

pub use dynamics::manipulate;
pub use render::{rasterize, rasterize_shaded, Image, STAMP_RADIUS};
pub use state::{DeformableState, Link, Topology, WORKSPACE};
pub use tasks::{make_task, reset, GoalShape, ObjectKind, TaskFamily, TaskSpec};

use crate::error::{Error, Result};
use crate::keypoints::{Frame, KeypointSet, Point};

/// Success threshold in normalized units: 10 px on a nominal 160-px frame.
pub const DEFAULT_SUCCESS_THRESHOLD: f64 = 10.0 / 160.0;
/// Pick-and-place actions allowed per episode.
pub const DEFAULT_MAX_STEPS: usize = 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub rope_particles: usize,
    pub rope_length: f64,
    pub ring_particles: usize,
    /// Ring circumference.
    pub ring_length: f64,
    pub cloth_rows: usize,
    pub cloth_cols: usize,
    /// Side length of the cloth along its rows.
    pub cloth_size: f64,
    /// Interpolation steps per drag.
    pub substeps: usize,
    /// Constraint sweeps after each substep.
    pub iterations: usize,
    pub relax_tolerance: f64,
    pub relax_max_iterations: usize,
    pub keypoints: usize,
    pub success_threshold: f64,
    pub max_steps: usize,
    /// Goals keep this distance from the workspace border.
    pub margin: f64,
    pub start_offset_min: f64,
    pub start_offset_max: f64,
    /// Radians.
    pub max_start_rotation: f64,
    pub scramble_moves: usize,
    pub scramble_min: f64,
    pub scramble_max: f64,
    pub translate_min: f64,
    pub translate_max: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            rope_particles: 32,
            rope_length: 0.8,
            ring_particles: 32,
            ring_length: 1.0,
            cloth_rows: 8,
            cloth_cols: 8,
            cloth_size: 0.35,
            substeps: 10,
            iterations: 20,
            relax_tolerance: 0.01,
            relax_max_iterations: 2000,
            keypoints: 8,
            success_threshold: DEFAULT_SUCCESS_THRESHOLD,
            max_steps: DEFAULT_MAX_STEPS,
            margin: 0.1,
            start_offset_min: 0.1,
            start_offset_max: 0.25,
            max_start_rotation: 1.5,
            scramble_moves: 4,
            scramble_min: 0.1,
            scramble_max: 0.3,
            translate_min: 0.2,
            translate_max: 0.4,
        }
    }
}

impl SimConfig {
    pub fn rope_spacing(&self) -> f64 {
        self.rope_length / (self.rope_particles - 1) as f64
    }

    pub fn ring_spacing(&self) -> f64 {
        self.ring_length / self.ring_particles as f64
    }

    pub fn cloth_spacing(&self) -> f64 {
        self.cloth_size / (self.cloth_rows - 1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.rope_particles < 2 || self.ring_particles < 3 || self.cloth_rows < 2 || self.cloth_cols < 2 {
            return bad("object too small");
        }
        if self.keypoints == 0 || self.keypoints > self.rope_particles.min(self.ring_particles) {
            return bad("keypoint count must be in 1..=particle count");
        }
        if self.success_threshold <= 0.0 || self.max_steps == 0 {
            return bad("threshold and step budget must be positive");
        }
        if !(0.0..0.5).contains(&self.margin) {
            return bad("margin must be in [0, 0.5)");
        }
        if self.substeps == 0 || self.iterations == 0 {
            return bad("substeps and iterations must be positive");
        }
        Ok(())
    }
}

/// Normalized distance change `(‖prev − goal‖ − ‖next − goal‖) / ‖prev − goal‖`
/// on stacked coordinates; 0 when `prev` already sits on the goal.
pub fn reward(prev: &KeypointSet, next: &KeypointSet, goal: &KeypointSet) -> Result<f64> {
    prev.ensure_same_len(goal)?;
    next.ensure_same_len(goal)?;
    let before = prev.stacked_distance(goal)?;
    if before < 1e-9 {
        return Ok(0.0);
    }
    let after = next.stacked_distance(goal)?;
    Ok((before - after) / before)
}

/// Mean per-keypoint distance strictly below `threshold`.
pub fn success(current: &KeypointSet, goal: &KeypointSet, threshold: f64) -> Result<bool> {
    Ok(current.mean_distance(goal)? < threshold)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    /// Stacked distance to the goal before and after the action.
    pub prev_distance: f64,
    pub next_distance: f64,
    pub mean_distance: f64,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub next_kps: KeypointSet,
    pub reward: f64,
    pub terminal: bool,
    pub info: StepInfo,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub current: KeypointSet,
    pub goal: KeypointSet,
}

/// Episode interface the trainer and evaluator drive.
pub trait Environment {
    fn keypoint_count(&self) -> usize;
    fn max_steps(&self) -> usize;
    /// Starts an episode on the task derived from `task_seed`.
    fn reset(&mut self, task_seed: u64) -> Result<Observation>;
    fn step(&mut self, pick: Point, place: Point) -> Result<StepResult>;
}

/// Simulator-backed episodes for one task family.
#[derive(Clone, Debug)]
pub struct RearrangeEnv {
    config: SimConfig,
    family: TaskFamily,
    task: Option<TaskSpec>,
    state: Option<DeformableState>,
    steps: usize,
    done: bool,
}

impl RearrangeEnv {
    pub fn new(config: SimConfig, family: TaskFamily) -> Result<Self> {
        config.validate()?;
        Ok(RearrangeEnv {
            config,
            family,
            task: None,
            state: None,
            steps: 0,
            done: false,
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn family(&self) -> TaskFamily {
        self.family
    }

    pub fn task(&self) -> Option<&TaskSpec> {
        self.task.as_ref()
    }

    pub fn state(&self) -> Option<&DeformableState> {
        self.state.as_ref()
    }

    pub fn steps_taken(&self) -> usize {
        self.steps
    }

    pub fn current_keypoints(&self) -> Result<KeypointSet> {
        let state = self.state.as_ref().ok_or(Error::EpisodeFinished)?;
        state.keypoints(self.config.keypoints, Frame::Current)
    }

    /// Starts an episode from an explicit task and initial state.
    pub fn start(&mut self, task: TaskSpec, state: DeformableState) -> Result<Observation> {
        let goal = task.goal_kps.clone();
        self.task = Some(task);
        self.state = Some(state);
        self.steps = 0;
        self.done = false;
        Ok(Observation {
            current: self.current_keypoints()?,
            goal,
        })
    }
}

impl Environment for RearrangeEnv {
    fn keypoint_count(&self) -> usize {
        self.config.keypoints
    }

    fn max_steps(&self) -> usize {
        self.config.max_steps
    }

    fn reset(&mut self, task_seed: u64) -> Result<Observation> {
        let task = make_task(self.family, task_seed, &self.config)?;
        let state = reset(&task, task_seed, &self.config)?;
        self.start(task, state)
    }

    fn step(&mut self, pick: Point, place: Point) -> Result<StepResult> {
        if self.done {
            return Err(Error::EpisodeFinished);
        }
        let (task, state) = match (&self.task, &self.state) {
            (Some(t), Some(s)) => (t, s),
            _ => return Err(Error::EpisodeFinished),
        };
        let k = self.config.keypoints;
        let prev = state.keypoints(k, Frame::Current)?;
        let next_state = manipulate(state, pick, place, &self.config);
        let next_kps = next_state.keypoints(k, Frame::Current)?;
        let r = reward(&prev, &next_kps, &task.goal_kps)?;
        let hit = success(&next_kps, &task.goal_kps, self.config.success_threshold)?;
        let info = StepInfo {
            prev_distance: prev.stacked_distance(&task.goal_kps)?,
            next_distance: next_kps.stacked_distance(&task.goal_kps)?,
            mean_distance: next_kps.mean_distance(&task.goal_kps)?,
            success: hit,
        };
        self.state = Some(next_state);
        self.steps += 1;
        self.done = hit || self.steps >= self.config.max_steps;
        Ok(StepResult {
            next_kps,
            reward: r,
            terminal: self.done,
            info,
        })
    }
}

/// One line of a rollout log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub step: usize,
    pub keypoints: Vec<Point>,
    pub pick: Option<usize>,
    pub place: Option<usize>,
    pub reward: f64,
    pub success: bool,
}
