use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::dynamics::manipulate;
use super::state::{DeformableState, Topology};
use super::SimConfig;
use crate::error::{Error, Result};
use crate::keypoints::{Frame, KeypointSet, Point};

/// The eight rearranging task families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFamily {
    Straighten,
    VShape,
    NShape,
    RingCircle,
    RingSquare,
    RingTranslate,
    ClothFlatten,
    ClothFold,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 8] = [
        TaskFamily::Straighten,
        TaskFamily::VShape,
        TaskFamily::NShape,
        TaskFamily::RingCircle,
        TaskFamily::RingSquare,
        TaskFamily::RingTranslate,
        TaskFamily::ClothFlatten,
        TaskFamily::ClothFold,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::Straighten => "straighten",
            TaskFamily::VShape => "v-shape",
            TaskFamily::NShape => "n-shape",
            TaskFamily::RingCircle => "ring-circle",
            TaskFamily::RingSquare => "ring-square",
            TaskFamily::RingTranslate => "ring-translate",
            TaskFamily::ClothFlatten => "cloth-flatten",
            TaskFamily::ClothFold => "cloth-fold",
        }
    }

    pub fn object(self) -> ObjectKind {
        match self {
            TaskFamily::Straighten | TaskFamily::VShape | TaskFamily::NShape => ObjectKind::Rope,
            TaskFamily::RingCircle | TaskFamily::RingSquare | TaskFamily::RingTranslate => ObjectKind::Ring,
            TaskFamily::ClothFlatten | TaskFamily::ClothFold => ObjectKind::Cloth,
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskFamily::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::UnknownFamily(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectKind {
    Rope,
    Ring,
    Cloth,
}

/// Shape parameters drawn for a goal, kept for inspection and tests.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum GoalShape {
    Line,
    V {
        /// Shorter leg over longer leg, in `[0.5, 1]`.
        side_ratio: f64,
        /// Included angle at the vertex, radians in `[30°, 120°]`.
        angle: f64,
    },
    N {
        first_angle: f64,
        second_angle: f64,
    },
    Circle,
    Square,
    Translate {
        offset: Point,
    },
    Flat,
    Fold {
        /// `true` folds rows onto rows (fold line parallel to the columns axis).
        across_rows: bool,
    },
}

/// One goal-conditioned rearranging task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub family: TaskFamily,
    pub seed: u64,
    pub shape: GoalShape,
    /// Rotation applied to the local goal frame.
    pub rotation: f64,
    pub goal_state: DeformableState,
    pub goal_kps: KeypointSet,
    /// Object configuration the episode starts from before the reset offset and scrambling.
    pub start_state: DeformableState,
}

fn rotate(p: Point, theta: f64) -> Point {
    let (s, c) = theta.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

fn centroid(pts: &[Point]) -> Point {
    let n = pts.len() as f64;
    let s = pts.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0], a[1] + p[1]]);
    [s[0] / n, s[1] / n]
}

fn bbox(pts: &[Point]) -> (Point, Point) {
    pts.iter().fold(
        ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]),
        |(lo, hi), p| ([lo[0].min(p[0]), lo[1].min(p[1])], [hi[0].max(p[0]), hi[1].max(p[1])]),
    )
}

/// Places `count` particles along an open polyline so consecutive particles
/// are exactly `spacing` apart (chord length, not arc length).
pub(crate) fn place_on_polyline(vertices: &[Point], count: usize, spacing: f64) -> Vec<Point> {
    let mut out = vec![vertices[0]];
    let mut seg = 0;
    while out.len() < count {
        let prev = *out.last().expect("nonempty");
        // Find the first point on the polyline, at or after segment `seg`,
        // that lies `spacing` away from `prev`.
        let mut placed = None;
        while seg + 1 < vertices.len() {
            let (a, b) = (vertices[seg], vertices[seg + 1]);
            if let Some(t) = circle_exit(prev, spacing, a, b) {
                placed = Some([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
                break;
            }
            seg += 1;
        }
        let next = placed.unwrap_or_else(|| {
            // Ran off the end: continue straight along the last segment.
            let n = vertices.len();
            let (a, b) = (vertices[n - 2], vertices[n - 1]);
            let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
            [prev[0] + spacing * (b[0] - a[0]) / len, prev[1] + spacing * (b[1] - a[1]) / len]
        });
        out.push(next);
    }
    out
}

/// Largest `t ∈ [0, 1]` with `|a + t(b - a) - c| = r`, if the segment leaves the circle.
fn circle_exit(c: Point, r: f64, a: Point, b: Point) -> Option<f64> {
    let d = [b[0] - a[0], b[1] - a[1]];
    let f = [a[0] - c[0], a[1] - c[1]];
    let qa = d[0] * d[0] + d[1] * d[1];
    if qa < 1e-18 {
        return None;
    }
    let qb = 2.0 * (f[0] * d[0] + f[1] * d[1]);
    let qc = f[0] * f[0] + f[1] * f[1] - r * r;
    let disc = qb * qb - 4.0 * qa * qc;
    if disc < 0.0 {
        return None;
    }
    let t = (-qb + disc.sqrt()) / (2.0 * qa);
    (0.0..=1.0).contains(&t).then_some(t)
}

fn rope_line(cfg: &SimConfig) -> Vec<Point> {
    let p = cfg.rope_particles;
    let s = cfg.rope_spacing();
    let half = s * (p - 1) as f64 / 2.0;
    (0..p).map(|i| [i as f64 * s - half, 0.0]).collect()
}

fn ring_circle(cfg: &SimConfig) -> Vec<Point> {
    let p = cfg.ring_particles;
    let radius = cfg.ring_spacing() / (2.0 * (PI / p as f64).sin());
    (0..p)
        .map(|i| {
            let a = 2.0 * PI * i as f64 / p as f64;
            [radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

fn cloth_flat(cfg: &SimConfig) -> Vec<Point> {
    let (rows, cols) = (cfg.cloth_rows, cfg.cloth_cols);
    let s = cfg.cloth_spacing();
    let (hr, hc) = (s * (rows - 1) as f64 / 2.0, s * (cols - 1) as f64 / 2.0);
    (0..rows * cols)
        .map(|i| [(i / cols) as f64 * s - hr, (i % cols) as f64 * s - hc])
        .collect()
}

fn topology(kind: ObjectKind, cfg: &SimConfig) -> (Topology, f64) {
    match kind {
        ObjectKind::Rope => (Topology::OpenChain, cfg.rope_spacing()),
        ObjectKind::Ring => (Topology::ClosedChain, cfg.ring_spacing()),
        ObjectKind::Cloth => (
            Topology::Grid {
                rows: cfg.cloth_rows,
                cols: cfg.cloth_cols,
            },
            cfg.cloth_spacing(),
        ),
    }
}

fn build(kind: ObjectKind, cfg: &SimConfig, positions: Vec<Point>) -> Result<DeformableState> {
    let (topo, spacing) = topology(kind, cfg);
    DeformableState::new(positions, topo, spacing)
}

/// Rotates local points by `theta` about their centroid and places the
/// centroid uniformly where the bounding box stays inside the margins.
fn place_randomly(local: &[Point], theta: f64, margin: f64, rng: &mut ChaCha8Rng) -> Result<Vec<Point>> {
    let c = centroid(local);
    let pts: Vec<Point> = local.iter().map(|p| rotate([p[0] - c[0], p[1] - c[1]], theta)).collect();
    let (lo, hi) = bbox(&pts);
    let mut shift = [0.0; 2];
    for axis in 0..2 {
        let min = margin - lo[axis];
        let max = 1.0 - margin - hi[axis];
        if min > max {
            return Err(Error::Config("object does not fit inside the workspace margins".into()));
        }
        shift[axis] = rng.gen_range(min..=max);
    }
    Ok(pts.iter().map(|p| [p[0] + shift[0], p[1] + shift[1]]).collect())
}

/// Applies the same rotation-about-centroid and translation used for a goal to another local shape.
fn place_like(local: &[Point], theta: f64, center: Point) -> Vec<Point> {
    let c = centroid(local);
    local
        .iter()
        .map(|p| {
            let r = rotate([p[0] - c[0], p[1] - c[1]], theta);
            [r[0] + center[0], r[1] + center[1]]
        })
        .collect()
}

/// Samples a task of `family` deterministically from `seed`.
pub fn make_task(family: TaskFamily, seed: u64, cfg: &SimConfig) -> Result<TaskSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a5c_0000_0000_0000 ^ (family as u64) << 40);
    let theta = rng.gen_range(0.0..2.0 * PI);
    let margin = cfg.margin;
    let kind = family.object();
    let (goal_local, shape, start_local): (Vec<Point>, GoalShape, Vec<Point>) = match family {
        TaskFamily::Straighten => (rope_line(cfg), GoalShape::Line, rope_line(cfg)),
        TaskFamily::VShape => {
            let side_ratio = rng.gen_range(0.5..=1.0);
            let angle = rng.gen_range(30f64.to_radians()..=120f64.to_radians());
            let total = cfg.rope_length;
            let a = total / (1.0 + side_ratio);
            let b = total - a;
            let (s, c) = (angle / 2.0).sin_cos();
            let verts = [[-a * s, a * c], [0.0, 0.0], [b * s, b * c]];
            let pts = place_on_polyline(&verts, cfg.rope_particles, cfg.rope_spacing());
            (pts, GoalShape::V { side_ratio, angle }, rope_line(cfg))
        }
        TaskFamily::NShape => {
            let first_angle = rng.gen_range(30f64.to_radians()..=90f64.to_radians());
            let second_angle = rng.gen_range(30f64.to_radians()..=90f64.to_radians());
            let mut fr: [f64; 3] = [0.0; 3];
            for f in &mut fr {
                *f = rng.gen_range(0.25..=0.45);
            }
            let norm: f64 = fr.iter().sum();
            let lens: Vec<f64> = fr.iter().map(|f| f / norm * cfg.rope_length).collect();
            let d1 = [0.0, 1.0];
            let d2 = [first_angle.sin(), -first_angle.cos()];
            let d3 = rotate([-d2[0], -d2[1]], -second_angle);
            let p0 = [0.0, 0.0];
            let p1 = [p0[0] + lens[0] * d1[0], p0[1] + lens[0] * d1[1]];
            let p2 = [p1[0] + lens[1] * d2[0], p1[1] + lens[1] * d2[1]];
            let p3 = [p2[0] + lens[2] * d3[0], p2[1] + lens[2] * d3[1]];
            let pts = place_on_polyline(&[p0, p1, p2, p3], cfg.rope_particles, cfg.rope_spacing());
            let shape = GoalShape::N {
                first_angle,
                second_angle,
            };
            // Start from a straight rope along the N's overall direction.
            let dir = [p3[0] - p0[0], p3[1] - p0[1]];
            let phi = dir[1].atan2(dir[0]);
            let start = rope_line(cfg).into_iter().map(|p| rotate(p, phi)).collect();
            (pts, shape, start)
        }
        TaskFamily::RingCircle | TaskFamily::RingTranslate => {
            let shape = if family == TaskFamily::RingCircle {
                GoalShape::Circle
            } else {
                GoalShape::Translate { offset: [0.0, 0.0] }
            };
            (ring_circle(cfg), shape, ring_circle(cfg))
        }
        TaskFamily::RingSquare => {
            let p = cfg.ring_particles;
            let side = cfg.ring_spacing() * p as f64 / 4.0;
            let h = side / 2.0;
            // Walk the square starting mid-edge so corners fall between particles.
            let verts = [[h, 0.0], [h, h], [-h, h], [-h, -h], [h, -h], [h, 0.0]];
            let pts = place_on_polyline(&verts, p, cfg.ring_spacing());
            (pts, GoalShape::Square, ring_circle(cfg))
        }
        TaskFamily::ClothFlatten => (cloth_flat(cfg), GoalShape::Flat, cloth_flat(cfg)),
        TaskFamily::ClothFold => {
            let across_rows = rng.gen_bool(0.5);
            let flat = cloth_flat(cfg);
            let (rows, cols) = (cfg.cloth_rows, cfg.cloth_cols);
            let s = cfg.cloth_spacing();
            // Fold line through the lattice line nearest the center, so every
            // link keeps its rest length after reflection.
            let folded = flat
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let (r, c) = (i / cols, i % cols);
                    if across_rows {
                        let line = ((rows - 1) / 2) as f64 * s - s * (rows - 1) as f64 / 2.0;
                        if r > (rows - 1) / 2 { [2.0 * line - p[0], p[1]] } else { *p }
                    } else {
                        let line = ((cols - 1) / 2) as f64 * s - s * (cols - 1) as f64 / 2.0;
                        if c > (cols - 1) / 2 { [p[0], 2.0 * line - p[1]] } else { *p }
                    }
                })
                .collect();
            (folded, GoalShape::Fold { across_rows }, flat)
        }
    };

    let mut goal_positions = place_randomly(&goal_local, theta, margin, &mut rng)?;
    let goal_center = centroid(&goal_positions);
    let mut start_positions = match family {
        // The flat sheet the fold starts from shares the folded goal's frame.
        TaskFamily::ClothFold => {
            let c_goal = centroid(&goal_local);
            let c_flat = centroid(&start_local);
            let delta = rotate([c_flat[0] - c_goal[0], c_flat[1] - c_goal[1]], theta);
            place_like(&start_local, theta, [goal_center[0] + delta[0], goal_center[1] + delta[1]])
        }
        _ => place_like(&start_local, theta, goal_center),
    };
    let mut shape = shape;
    if family == TaskFamily::RingTranslate {
        // The goal is the start shape moved somewhere else in the workspace.
        let (lo, hi) = bbox(&goal_positions);
        let mut offset = [0.0; 2];
        for _ in 0..64 {
            let mag = rng.gen_range(cfg.translate_min..=cfg.translate_max);
            let dir = rng.gen_range(0.0..2.0 * PI);
            let cand = [mag * dir.cos(), mag * dir.sin()];
            let fits = (0..2).all(|a| lo[a] + cand[a] >= margin / 2.0 && hi[a] + cand[a] <= 1.0 - margin / 2.0);
            if fits {
                offset = cand;
                break;
            }
        }
        start_positions = goal_positions.clone();
        for p in &mut goal_positions {
            p[0] += offset[0];
            p[1] += offset[1];
        }
        shape = GoalShape::Translate { offset };
    }
    let mut goal_state = build(kind, cfg, goal_positions)?;
    if matches!(family, TaskFamily::RingSquare) {
        goal_state.relax(cfg.relax_tolerance, cfg.relax_max_iterations);
    }
    let start_state = build(kind, cfg, start_positions)?;
    let goal_kps = goal_state.keypoints(cfg.keypoints, Frame::Goal)?;
    Ok(TaskSpec {
        family,
        seed,
        shape,
        rotation: theta,
        goal_state,
        goal_kps,
        start_state,
    })
}

/// Initial configuration for an episode: the task's start shape moved by a
/// random rigid offset, then disturbed by random pick-and-place moves.
pub fn reset(task: &TaskSpec, seed: u64, cfg: &SimConfig) -> Result<DeformableState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x5eed);
    let mut state = task.start_state.clone();
    let (rot_max, off_min, off_max, moves) = match task.family {
        TaskFamily::RingTranslate => (cfg.max_start_rotation / 4.0, 0.0, cfg.start_offset_min, 0),
        TaskFamily::ClothFold => (cfg.max_start_rotation / 4.0, 0.0, cfg.start_offset_min, 0),
        _ => (cfg.max_start_rotation, cfg.start_offset_min, cfg.start_offset_max, cfg.scramble_moves),
    };
    let rot = if rot_max > 0.0 { rng.gen_range(-rot_max..=rot_max) } else { 0.0 };
    let mag = if off_max > off_min { rng.gen_range(off_min..=off_max) } else { off_min };
    let dir = rng.gen_range(0.0..2.0 * PI);
    let c = state.centroid();
    let mut pts: Vec<Point> = state
        .positions
        .iter()
        .map(|p| {
            let r = rotate([p[0] - c[0], p[1] - c[1]], rot);
            [r[0] + c[0] + mag * dir.cos(), r[1] + c[1] + mag * dir.sin()]
        })
        .collect();
    // Keep the offset object inside the margins.
    let (lo, hi) = bbox(&pts);
    let half = cfg.margin / 2.0;
    for axis in 0..2 {
        let fix = if lo[axis] < half {
            half - lo[axis]
        } else if hi[axis] > 1.0 - half {
            1.0 - half - hi[axis]
        } else {
            0.0
        };
        pts.iter_mut().for_each(|p| p[axis] += fix);
    }
    state.positions = pts;
    for _ in 0..moves {
        let i = rng.gen_range(0..state.len());
        let from = state.positions[i];
        let mag = rng.gen_range(cfg.scramble_min..=cfg.scramble_max);
        let dir = rng.gen_range(0.0..2.0 * PI);
        let to = [
            (from[0] + mag * dir.cos()).clamp(cfg.margin, 1.0 - cfg.margin),
            (from[1] + mag * dir.sin()).clamp(cfg.margin, 1.0 - cfg.margin),
        ];
        state = manipulate(&state, from, to, cfg);
    }
    state.relax(cfg.relax_tolerance, cfg.relax_max_iterations);
    Ok(state)
}
