use std::io::{BufRead, Read, Write};

use super::state::DeformableState;
use crate::error::{Error, Result};

/// Single-channel image, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn blank(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// Number of nonzero pixels.
    pub fn coverage(&self) -> usize {
        self.pixels.iter().filter(|&&v| v > 0.0).count()
    }

    /// 8-bit binary PGM (`P5`).
    pub fn write_pgm(&self, mut out: impl Write) -> Result<()> {
        write!(out, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        out.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_pgm(input: impl Read) -> Result<Image> {
        let mut reader = std::io::BufReader::new(input);
        let mut header = Vec::new();
        // magic, width, height, maxval; comments start with '#'
        while header.len() < 4 {
            let mut line = String::new();
            if reader.read_line(&mut line)? == 0 {
                return Err(Error::Parse {
                    what: "pgm".into(),
                    detail: "truncated header".into(),
                });
            }
            let line = line.split('#').next().unwrap_or("");
            header.extend(line.split_whitespace().map(str::to_string));
        }
        let bad = |detail: String| Error::Parse {
            what: "pgm".into(),
            detail,
        };
        if header[0] != "P5" {
            return Err(bad(format!("unsupported magic {}", header[0])));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("{s}: {e}")));
        let (width, height, maxval) = (num(&header[1])?, num(&header[2])?, num(&header[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(bad(format!("maxval {maxval}")));
        }
        let mut bytes = vec![0u8; width * height];
        reader.read_exact(&mut bytes)?;
        Ok(Image {
            height,
            width,
            pixels: bytes.iter().map(|&b| b as f64 / maxval as f64).collect(),
        })
    }
}

/// Stamp radius in pixels.
pub const STAMP_RADIUS: f64 = 2.0;

fn stamp(img: &mut Image, x: f64, y: f64, value: f64) {
    let r = STAMP_RADIUS;
    let (h, w) = (img.height as i64, img.width as i64);
    let (r0, r1) = ((x - r).ceil() as i64, (x + r).floor() as i64);
    let (c0, c1) = ((y - r).ceil() as i64, (y + r).floor() as i64);
    for row in r0.max(0)..=r1.min(h - 1) {
        for col in c0.max(0)..=c1.min(w - 1) {
            let (dr, dc) = (row as f64 - x, col as f64 - y);
            if dr * dr + dc * dc <= r * r {
                let px = &mut img.pixels[row as usize * img.width + col as usize];
                *px = px.max(value);
            }
        }
    }
}

/// Draws every particle and link with `shade(particle_a, particle_b, t)`
/// giving the intensity at fraction `t` along the link. A point `(x, y)` in
/// the unit workspace maps to pixel row `x·H`, column `y·W`.
fn draw(state: &DeformableState, h: usize, w: usize, shade: impl Fn(usize, usize, f64) -> f64) -> Image {
    let mut img = Image::blank(h, w);
    let to_px = |p: [f64; 2]| (p[0] * h as f64, p[1] * w as f64);
    for (i, &p) in state.positions.iter().enumerate() {
        let (x, y) = to_px(p);
        stamp(&mut img, x, y, shade(i, i, 0.0));
    }
    for link in &state.links {
        let (ax, ay) = to_px(state.positions[link.a]);
        let (bx, by) = to_px(state.positions[link.b]);
        let len = ((bx - ax).powi(2) + (by - ay).powi(2)).sqrt();
        let n = (len / 0.25).ceil().max(1.0) as usize;
        for s in 0..=n {
            let t = s as f64 / n as f64;
            stamp(&mut img, ax + t * (bx - ax), ay + t * (by - ay), shade(link.a, link.b, t));
        }
    }
    img
}

/// Binary rendering: intensity 1 on a 0 background.
pub fn rasterize(state: &DeformableState, height: usize, width: usize) -> Image {
    draw(state, height, width, |_, _, _| 1.0)
}

/// Like [`rasterize`] but intensity ramps linearly with particle index from
/// `low` at particle 0 to 1 at the last particle, which makes the two ends of
/// a rope distinguishable.
pub fn rasterize_shaded(state: &DeformableState, height: usize, width: usize, low: f64) -> Image {
    let last = (state.len().max(2) - 1) as f64;
    draw(state, height, width, |a, b, t| {
        let idx = a as f64 + t * (b as f64 - a as f64);
        low + (1.0 - low) * (idx / last)
    })
}
