//! Ordered keypoint coordinates shared by the detector, the simulator and the Q-network.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// Which observation a keypoint set was taken from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Frame {
    Current,
    Goal,
}

/// `K` ordered `(x, y)` coordinates.
///
/// Units depend on the producer: the simulator reports normalized workspace
/// coordinates in `[0, 1]²`, the detector reports image pixels with `x`
/// along rows and `y` along columns. Index `i` of two sets refers to the
/// same physical point of the object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub points: Vec<Point>,
    pub frame: Frame,
}

impl KeypointSet {
    pub fn new(points: Vec<Point>, frame: Frame) -> Self {
        KeypointSet { points, frame }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn with_frame(mut self, frame: Frame) -> Self {
        self.frame = frame;
        self
    }

    /// Multiplies the two coordinates by `sx` and `sy`.
    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        KeypointSet {
            points: self.points.iter().map(|p| [p[0] * sx, p[1] * sy]).collect(),
            frame: self.frame,
        }
    }

    pub fn translated(&self, d: Point) -> Self {
        KeypointSet {
            points: self.points.iter().map(|p| [p[0] + d[0], p[1] + d[1]]).collect(),
            frame: self.frame,
        }
    }

    pub fn ensure_same_len(&self, other: &KeypointSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::KeypointMismatch {
                left: self.len(),
                right: other.len(),
            });
        }
        Ok(())
    }

    /// Euclidean norm of the stacked coordinate difference `‖self - other‖₂`.
    pub fn stacked_distance(&self, other: &KeypointSet) -> Result<f64> {
        self.ensure_same_len(other)?;
        Ok(self
            .points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| dist2(*a, *b))
            .sum::<f64>()
            .sqrt())
    }

    /// Mean of the per-index Euclidean distances.
    pub fn mean_distance(&self, other: &KeypointSet) -> Result<f64> {
        self.ensure_same_len(other)?;
        if self.is_empty() {
            return Ok(0.0);
        }
        Ok(self
            .points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| dist2(*a, *b).sqrt())
            .sum::<f64>()
            / self.len() as f64)
    }
}

pub fn dist2(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

pub fn dist(a: Point, b: Point) -> f64 {
    dist2(a, b).sqrt()
}
