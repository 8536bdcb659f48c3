use diffcore::gradcheck::check_params;
use diffcore::{Array, Tape};
use proptest::prelude::*;
use rearrange::keypoint::*;
use rearrange::keypoints::{Frame, KeypointSet};
use rearrange::simenv::SimConfig;

fn kps(points: &[[f64; 2]]) -> KeypointSet {
    KeypointSet::new(points.to_vec(), Frame::Current)
}

fn toy_config() -> DetectorConfig {
    DetectorConfig {
        keypoints: 2,
        height: 16,
        width: 16,
        channels: vec![4, 4],
        steps: 200,
        ..DetectorConfig::default()
    }
}

#[test]
fn loss_of_unit_offset_matches_direct_summation() {
    let cfg = DetectorConfig {
        keypoints: 1,
        ..DetectorConfig::default()
    };
    let (a, b) = ([30.0, 30.0], [31.0, 30.0]);
    let s2 = 2.0 * cfg.sigma * cfg.sigma;
    let mut direct = 0.0;
    for r in 0..64 {
        for c in 0..64 {
            let g = |p: [f64; 2]| (-((r as f64 - p[0]).powi(2) + (c as f64 - p[1]).powi(2)) / s2).exp();
            direct += (g(a) - g(b)).powi(2);
        }
    }
    direct /= 4096.0;
    let got = detector_loss(&kps(&[a]), &kps(&[b]), &cfg).unwrap();
    assert!((got - direct).abs() < 1e-12 * direct.max(1.0), "{got} vs {direct}");
    // Far from the border the lattice sum is close to the continuous integral.
    let sigma: f64 = cfg.sigma;
    let integral = 2.0 * std::f64::consts::PI * sigma * sigma * (1.0 - (-1.0 / (4.0 * sigma * sigma)).exp()) / 4096.0;
    assert!((got - integral).abs() / integral < 1e-3, "{got} vs {integral}");
    assert!((got - 3.7176e-4).abs() < 1e-7);
}

#[test]
fn loss_identity_and_order_sensitivity() {
    let cfg = DetectorConfig {
        keypoints: 2,
        ..DetectorConfig::default()
    };
    let a = kps(&[[10.0, 10.0], [40.0, 50.0]]);
    let swapped = kps(&[[40.0, 50.0], [10.0, 10.0]]);
    assert_eq!(detector_loss(&a, &a, &cfg).unwrap(), 0.0);
    assert!(detector_loss(&a, &swapped, &cfg).unwrap() > 1e-3);
}

proptest! {
    #[test]
    fn loss_is_symmetric_and_nonnegative(
        p in prop::collection::vec((0.0f64..64.0, 0.0f64..64.0), 3),
        q in prop::collection::vec((0.0f64..64.0, 0.0f64..64.0), 3),
    ) {
        let cfg = DetectorConfig { keypoints: 3, ..DetectorConfig::default() };
        let a = kps(&p.iter().map(|&(x, y)| [x, y]).collect::<Vec<_>>());
        let b = kps(&q.iter().map(|&(x, y)| [x, y]).collect::<Vec<_>>());
        let ab = detector_loss(&a, &b, &cfg).unwrap();
        let ba = detector_loss(&b, &a, &cfg).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-15);
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let cfg = toy_config();
    let samples = rope_samples(2, 5, &SimConfig::default(), &cfg).unwrap();
    let mut det = Detector::new(cfg.clone()).unwrap();
    // Zero biases put blank-background pre-activations exactly on the ReLU
    // kink, where one-sided and central differences disagree.
    let ids: Vec<_> = det.params().ids().collect();
    for id in ids {
        if det.params().get(id).name.ends_with("bias") {
            for (i, v) in det.params_mut().value_mut(id).data_mut().iter_mut().enumerate() {
                *v = 0.05 + 0.01 * i as f64;
            }
        }
    }
    let shadow = det.clone();
    let images: Vec<_> = samples.iter().map(|s| &s.image).collect();
    let batch = det.batch(&images).unwrap();
    let truth: Vec<f64> = samples.iter().flat_map(|s| s.truth.points.iter().flat_map(|p| *p)).collect();
    let loss = |d: &Detector, tape: &mut Tape| {
        let x = tape.constant(batch.clone()).unwrap();
        let pred = d.coordinates_var(tape, x).unwrap();
        let t = tape.constant(Array::new([truth.len() / 2, 2], truth.clone()).unwrap()).unwrap();
        detector_loss_var(tape, pred, t, cfg.sigma, cfg.height, cfg.width).unwrap()
    };
    let mut store = det.params().clone();
    let report = check_params(
        &mut store,
        &[],
        1e-5,
        1e-7,
        |s| {
            *det.params_mut() = s.clone();
            let mut tape = Tape::new();
            let l = loss(&det, &mut tape);
            tape.backward(l, s)?;
            Ok(())
        },
        |s| {
            let mut probe = shadow.clone();
            *probe.params_mut() = s.clone();
            let mut tape = Tape::inference();
            let l = loss(&probe, &mut tape);
            Ok(tape.value(l).data()[0])
        },
    )
    .unwrap();
    assert_eq!(report.checked, det.params().scalar_count());
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn single_image_is_memorized() {
    let cfg = DetectorConfig {
        height: 32,
        width: 32,
        keypoints: 4,
        batch_size: 1,
        anneal_fraction: 0.0,
        steps: 200,
        ..DetectorConfig::default()
    };
    let samples = rope_samples(1, 9, &SimConfig::default(), &cfg).unwrap();
    let (det, report) = train_detector(&samples, &cfg).unwrap();
    let windows: Vec<f64> = report.losses.chunks(50).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    for w in windows.windows(2) {
        assert!(w[1] < w[0], "{windows:?}");
    }
    let before = mean_error(&Detector::new(cfg.clone()).unwrap(), &samples).unwrap();
    let after = mean_error(&det, &samples).unwrap();
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn dataset_round_trip() {
    let cfg = DetectorConfig::default();
    let samples = rope_samples(6, 1, &SimConfig::default(), &cfg).unwrap();
    let dir = std::env::temp_dir().join(format!("kp-dataset-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    write_dataset(&dir, &samples).unwrap();
    let mut back = read_dataset(&dir).unwrap();
    back.sort_by(|a, b| a.id.cmp(&b.id));
    assert_eq!(back.len(), samples.len());
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!((&a.group, &a.id), (&b.group, &b.id));
        assert!(a.truth.mean_distance(&b.truth).unwrap() < 1e-6);
        assert!(a.image.pixels.iter().zip(&b.image.pixels).all(|(x, y)| (x - y).abs() <= 0.5 / 255.0 + 1e-12));
    }
    std::fs::remove_dir_all(&dir).unwrap();
    assert!(matches!(read_dataset(&dir.join("missing")), Err(_)));
}

#[test]
fn training_is_deterministic() {
    let cfg = DetectorConfig {
        steps: 20,
        ..toy_config()
    };
    let samples = rope_samples(8, 2, &SimConfig::default(), &cfg).unwrap();
    let (a, ra) = train_detector(&samples, &cfg).unwrap();
    let (b, rb) = train_detector(&samples, &cfg).unwrap();
    assert_eq!(ra.losses, rb.losses);
    assert_eq!(a.to_bytes(), b.to_bytes());
}
