use super::state::DeformableState;
use super::SimConfig;
use crate::keypoints::Point;

/// Executes one pick-and-place: the particle nearest `pick` is grasped and
/// dragged by `place - pick` over `substeps` interpolation steps, with
/// `iterations` constraint sweeps after each. After release the object is
/// relaxed back to its rest lengths. The motion is quasi-static; there are no
/// velocities to carry over between actions.
pub fn manipulate(state: &DeformableState, pick: Point, place: Point, cfg: &SimConfig) -> DeformableState {
    let mut next = state.clone();
    let delta = [place[0] - pick[0], place[1] - pick[1]];
    if delta == [0.0, 0.0] {
        return next;
    }
    let Some(g) = next.nearest_particle(pick) else {
        return next;
    };
    let start = next.positions[g];
    let target = [(start[0] + delta[0]).clamp(0.0, 1.0), (start[1] + delta[1]).clamp(0.0, 1.0)];
    let f = cfg.substeps.max(1);
    for s in 1..=f {
        let t = s as f64 / f as f64;
        next.positions[g] = [start[0] + t * (target[0] - start[0]), start[1] + t * (target[1] - start[1])];
        next.project(cfg.iterations, Some(g));
    }
    next.relax(cfg.relax_tolerance, cfg.relax_max_iterations);
    next
}
