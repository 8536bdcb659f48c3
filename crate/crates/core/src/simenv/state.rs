use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keypoints::{dist, Frame, KeypointSet, Point};

/// Connectivity of the simulated object.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Topology {
    /// Rope: particle `i` linked to `i + 1`.
    OpenChain,
    /// Rope ring: an open chain plus the closing link `P-1 → 0`.
    ClosedChain,
    /// Cloth: row-major `rows × cols` lattice linking horizontal and vertical neighbors.
    Grid { rows: usize, cols: usize },
}

/// Distance constraint between two particles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub a: usize,
    pub b: usize,
    pub rest: f64,
}

/// Particle positions in the unit workspace plus their distance constraints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeformableState {
    pub positions: Vec<Point>,
    pub topology: Topology,
    pub links: Vec<Link>,
    /// Rest distance between neighboring particles.
    pub spacing: f64,
}

/// Lower and upper workspace bound for every coordinate.
pub const WORKSPACE: (f64, f64) = (0.0, 1.0);

fn clamp_point(p: &mut Point) {
    p[0] = p[0].clamp(WORKSPACE.0, WORKSPACE.1);
    p[1] = p[1].clamp(WORKSPACE.0, WORKSPACE.1);
}

impl DeformableState {
    /// Builds the links implied by `topology` with neighbor rest length `spacing`.
    pub fn new(positions: Vec<Point>, topology: Topology, spacing: f64) -> Result<Self> {
        let p = positions.len();
        let mut links = Vec::new();
        let link = |a, b| Link { a, b, rest: spacing };
        match topology {
            Topology::OpenChain => {
                links.extend((1..p).map(|i| link(i - 1, i)));
            }
            Topology::ClosedChain => {
                if p < 3 {
                    return Err(Error::Config(format!("a closed chain needs 3+ particles, got {p}")));
                }
                links.extend((1..p).map(|i| link(i - 1, i)));
                links.push(link(p - 1, 0));
            }
            Topology::Grid { rows, cols } => {
                if rows * cols != p || rows < 2 || cols < 2 {
                    return Err(Error::Config(format!("grid {rows}x{cols} with {p} particles")));
                }
                let id = |r: usize, c: usize| r * cols + c;
                for r in 0..rows {
                    for c in 0..cols {
                        if c + 1 < cols {
                            links.push(link(id(r, c), id(r, c + 1)));
                        }
                        if r + 1 < rows {
                            links.push(link(id(r, c), id(r + 1, c)));
                        }
                    }
                }
            }
        }
        Ok(DeformableState {
            positions,
            topology,
            links,
            spacing,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Largest `| |a - b| - rest | / rest` over all links.
    pub fn max_strain(&self) -> f64 {
        self.links
            .iter()
            .map(|l| (dist(self.positions[l.a], self.positions[l.b]) - l.rest).abs() / l.rest)
            .fold(0.0, f64::max)
    }

    /// Gauss-Seidel distance projection, alternating sweep direction.
    /// `pinned` particles have infinite mass.
    pub fn project(&mut self, iterations: usize, pinned: Option<usize>) {
        for it in 0..iterations {
            let n = self.links.len();
            for step in 0..n {
                let l = self.links[if it % 2 == 0 { step } else { n - 1 - step }];
                let (pa, pb) = (self.positions[l.a], self.positions[l.b]);
                let d = [pb[0] - pa[0], pb[1] - pa[1]];
                let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
                if len < 1e-12 {
                    continue;
                }
                let wa = if pinned == Some(l.a) { 0.0 } else { 1.0 };
                let wb = if pinned == Some(l.b) { 0.0 } else { 1.0 };
                let wsum = wa + wb;
                if wsum == 0.0 {
                    continue;
                }
                let c = (len - l.rest) / (len * wsum);
                let pa = &mut self.positions[l.a];
                pa[0] += wa * c * d[0];
                pa[1] += wa * c * d[1];
                clamp_point(pa);
                let pb = &mut self.positions[l.b];
                pb[0] -= wb * c * d[0];
                pb[1] -= wb * c * d[1];
                clamp_point(pb);
            }
        }
    }

    /// Projects until every link is within `tolerance` relative strain or
    /// `max_iterations` is exhausted; returns the final strain.
    pub fn relax(&mut self, tolerance: f64, max_iterations: usize) -> f64 {
        let mut strain = self.max_strain();
        let mut done = 0;
        while strain > tolerance && done < max_iterations {
            self.project(10, None);
            done += 10;
            strain = self.max_strain();
        }
        strain
    }

    pub fn nearest_particle(&self, p: Point) -> Option<usize> {
        self.positions
            .iter()
            .enumerate()
            .min_by(|a, b| dist(*a.1, p).total_cmp(&dist(*b.1, p)))
            .map(|(i, _)| i)
    }

    pub fn translate(&mut self, d: Point) {
        for p in &mut self.positions {
            p[0] += d[0];
            p[1] += d[1];
        }
    }

    pub fn centroid(&self) -> Point {
        let n = self.len().max(1) as f64;
        let s = self
            .positions
            .iter()
            .fold([0.0, 0.0], |acc, p| [acc[0] + p[0], acc[1] + p[1]]);
        [s[0] / n, s[1] / n]
    }

    /// Particle indices in canonical perimeter order for a grid, starting at
    /// corner `(0, 0)` and walking row 0, the last column, the last row
    /// backwards and column 0 upwards.
    fn perimeter(rows: usize, cols: usize) -> Vec<usize> {
        let id = |r: usize, c: usize| r * cols + c;
        let mut out: Vec<usize> = (0..cols).map(|c| id(0, c)).collect();
        out.extend((1..rows).map(|r| id(r, cols - 1)));
        out.extend((0..cols - 1).rev().map(|c| id(rows - 1, c)));
        out.extend((1..rows - 1).rev().map(|r| id(r, 0)));
        out
    }

    /// `K` keypoints in a fixed order.
    ///
    /// Chains are sampled at uniform rest arc length (open: both ends
    /// included; closed: starting at particle 0 and following particle
    /// order). Grids use every particle when `K = P`, otherwise uniform
    /// samples along the perimeter loop.
    pub fn keypoints(&self, k: usize, frame: Frame) -> Result<KeypointSet> {
        let p = self.len();
        if k > p || k == 0 {
            return Err(Error::TooManyKeypoints {
                requested: k,
                available: p,
            });
        }
        let points = match self.topology {
            Topology::OpenChain => {
                if k == 1 {
                    vec![self.positions[0]]
                } else {
                    (0..k)
                        .map(|i| {
                            let s = (i * (p - 1)) as f64 / (k - 1) as f64;
                            interpolate(&self.positions, s, false)
                        })
                        .collect()
                }
            }
            Topology::ClosedChain => (0..k)
                .map(|i| interpolate(&self.positions, (i * p) as f64 / k as f64, true))
                .collect(),
            Topology::Grid { rows, cols } => {
                if k == p {
                    self.positions.clone()
                } else {
                    let loop_ids = Self::perimeter(rows, cols);
                    if k > loop_ids.len() {
                        return Err(Error::TooManyKeypoints {
                            requested: k,
                            available: loop_ids.len(),
                        });
                    }
                    let ring: Vec<Point> = loop_ids.iter().map(|&i| self.positions[i]).collect();
                    (0..k)
                        .map(|i| interpolate(&ring, (i * ring.len()) as f64 / k as f64, true))
                        .collect()
                }
            }
        };
        Ok(KeypointSet::new(points, frame))
    }
}

/// Point at fractional particle index `s` along `pts` (wrapping when `closed`).
fn interpolate(pts: &[Point], s: f64, closed: bool) -> Point {
    let n = pts.len();
    let i = s.floor() as usize;
    let t = s - i as f64;
    let a = pts[i % n];
    if t == 0.0 {
        return a;
    }
    let j = if closed { (i + 1) % n } else { (i + 1).min(n - 1) };
    let b = pts[j];
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
}
