use std::time::Instant;

use diffcore::{Array, Optimizer, Real, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{detector_loss_var, Detector, DetectorConfig, Sample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    /// Loss of every step at that step's heatmap width.
    pub losses: Vec<f64>,
    pub elapsed_secs: f64,
    /// `true` when the wall-clock budget stopped training early.
    pub budget_hit: bool,
}

/// Heatmap width at `step`: geometric interpolation from `sigma_start` to
/// `sigma` over the annealing window, then constant.
pub fn sigma_at(config: &DetectorConfig, step: usize) -> f64 {
    let window = (config.anneal_fraction * config.steps as f64).round() as usize;
    if step >= window || window == 0 {
        return config.sigma;
    }
    let t = step as f64 / window as f64;
    config.sigma_start * (config.sigma / config.sigma_start).powf(t)
}

fn coords(samples: &[&Sample]) -> Result<Array> {
    let data: Vec<Real> = samples
        .iter()
        .flat_map(|s| s.truth.points.iter().flat_map(|p| [p[0] as Real, p[1] as Real]))
        .collect();
    let n = data.len() / 2;
    Ok(Array::new([n, 2], data)?)
}

/// Minibatch Adam on the heatmap loss. Deterministic given `config.seed`
/// unless the wall-clock budget cuts training short.
pub fn train_detector(samples: &[Sample], config: &DetectorConfig) -> Result<(Detector, TrainReport)> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(s) = samples.iter().find(|s| s.truth.len() != config.keypoints) {
        return Err(Error::KeypointMismatch {
            left: s.truth.len(),
            right: config.keypoints,
        });
    }
    let mut det = Detector::new(config.clone())?;
    let mut opt = Optimizer::adam(config.learning_rate as Real);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xde7e_c702);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let start = Instant::now();
    let mut report = TrainReport::default();
    for step in 0..config.steps {
        if config.time_budget_secs > 0 && start.elapsed().as_secs() >= config.time_budget_secs {
            report.budget_hit = true;
            break;
        }
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size.min(samples.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&samples[order[cursor]]);
            cursor += 1;
        }
        let images: Vec<_> = batch.iter().map(|s| &s.image).collect();
        let mut tape = Tape::new();
        let x = tape.constant(det.batch(&images)?)?;
        let pred = det.coordinates_var(&mut tape, x)?;
        let truth = tape.constant(coords(&batch)?)?;
        let sigma = sigma_at(config, step);
        let loss = detector_loss_var(&mut tape, pred, truth, sigma, config.height, config.width)?;
        report.losses.push(tape.value(loss).data()[0] as f64);
        tape.backward(loss, det.params_mut())?;
        opt.step(det.params_mut())?;
        report.steps += 1;
    }
    report.elapsed_secs = start.elapsed().as_secs_f64();
    Ok((det, report))
}

/// Mean Euclidean pixel distance between detections and truths over all keypoints.
pub fn mean_error(det: &Detector, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in samples.chunks(64) {
        let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        for (found, s) in det.detect_batch(&images)?.iter().zip(chunk) {
            total += found.mean_distance(&s.truth)? * found.len() as f64;
            count += found.len();
        }
    }
    Ok(total / count as f64)
}
