use std::fs;
use std::path::Path;

use super::DetectorConfig;
use crate::error::{Error, Result};
use crate::keypoints::{Frame, KeypointSet};
use crate::simenv::{make_task, rasterize_shaded, reset, Image, SimConfig, TaskFamily};

/// Intensity of the first particle in detector renders; the last is 1.
pub const SHADE_LOW: f64 = 0.25;

/// One image with its ground-truth keypoints in pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Sub-directory the sample is stored under.
    pub group: String,
    pub id: String,
    pub image: Image,
    pub truth: KeypointSet,
}

/// Renders `count` rope configurations (straight, V and N goals plus
/// scrambled episode starts) with arc-length shading.
pub fn rope_samples(count: usize, seed: u64, sim: &SimConfig, det: &DetectorConfig) -> Result<Vec<Sample>> {
    render_samples(&[TaskFamily::Straighten, TaskFamily::VShape, TaskFamily::NShape], count, seed, sim, det)
}

/// Cycles through `families`; every fourth sample is a goal configuration,
/// the rest are scrambled episode starts.
pub fn render_samples(
    families: &[TaskFamily],
    count: usize,
    seed: u64,
    sim: &SimConfig,
    det: &DetectorConfig,
) -> Result<Vec<Sample>> {
    if families.is_empty() {
        return Err(Error::Config("no task families to render".into()));
    }
    let mut cfg = sim.clone();
    cfg.keypoints = det.keypoints;
    (0..count)
        .map(|i| {
            let family = families[i % families.len()];
            let task_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let task = make_task(family, task_seed, &cfg)?;
            let state = if i % 4 == 3 {
                task.goal_state.clone()
            } else {
                reset(&task, task_seed, &cfg)?
            };
            let truth = state
                .keypoints(det.keypoints, Frame::Current)?
                .scaled(det.height as f64, det.width as f64);
            Ok(Sample {
                group: family.name().to_string(),
                id: format!("{i:05}"),
                image: rasterize_shaded(&state, det.height, det.width, SHADE_LOW),
                truth,
            })
        })
        .collect()
}

/// Writes `<dir>/<group>/<id>.pgm` and `<id>.txt` with one `k x y` line per keypoint.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    for s in samples {
        let sub = dir.join(&s.group);
        fs::create_dir_all(&sub)?;
        s.image.write_pgm(fs::File::create(sub.join(format!("{}.pgm", s.id)))?)?;
        let lines: String = s
            .truth
            .points
            .iter()
            .enumerate()
            .map(|(k, p)| format!("{k} {} {}\n", p[0], p[1]))
            .collect();
        fs::write(sub.join(format!("{}.txt", s.id)), lines)?;
    }
    Ok(())
}

fn parse_truth(text: &str) -> Result<KeypointSet> {
    let bad = |detail: String| Error::Parse { what: "truth file", detail };
    let mut points = Vec::new();
    for (n, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 {
            return Err(bad(format!("line {}: expected `k x y`", n + 1)));
        }
        let k: usize = f[0].parse().map_err(|e| bad(format!("line {}: {e}", n + 1)))?;
        if k != n {
            return Err(bad(format!("line {}: keypoint index {k} out of order", n + 1)));
        }
        let x: f64 = f[1].parse().map_err(|e| bad(format!("line {}: {e}", n + 1)))?;
        let y: f64 = f[2].parse().map_err(|e| bad(format!("line {}: {e}", n + 1)))?;
        points.push([x, y]);
    }
    Ok(KeypointSet::new(points, Frame::Current))
}

/// Reads every `<group>/<id>.pgm` + `<id>.txt` pair under `dir`, sorted by path.
pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let mut groups: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    groups.sort();
    let mut out = Vec::new();
    for g in groups {
        let mut images: Vec<_> = fs::read_dir(&g)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
            .collect();
        images.sort();
        for img in images {
            let truth = parse_truth(&fs::read_to_string(img.with_extension("txt"))?)?;
            out.push(Sample {
                group: g.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                id: img.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                image: Image::read_pgm(fs::File::open(&img)?)?,
                truth,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truth_lies_on_the_stroke() {
        let det = DetectorConfig::default();
        for s in rope_samples(30, 4, &SimConfig::default(), &det).unwrap() {
            for p in &s.truth.points {
                let (r, c) = (p[0].round() as usize, p[1].round() as usize);
                assert!(s.image.get(r.min(63), c.min(63)) > 0.0, "{} {:?}", s.id, p);
            }
        }
    }

    #[test]
    fn truth_parse_errors() {
        assert!(parse_truth("0 1 2\n1 3 4\n").is_ok());
        assert!(parse_truth("0 1\n").is_err());
        assert!(parse_truth("1 1 2\n").is_err());
        assert!(parse_truth("0 a 2\n").is_err());
    }
}
