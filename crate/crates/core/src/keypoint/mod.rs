//! Convolutional keypoint detector with a spatial-softmax readout.
//!
//! Image coordinates follow the simulator rasterizer: `x` indexes rows and
//! `y` columns, and lattice cell `(r, c)` sits at coordinate `(r, c)`.

mod dataset;
mod train;

use diffcore::{Array, Padding, ParamId, ParamStore, Real, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use dataset::{read_dataset, render_samples, rope_samples, write_dataset, Sample};
pub use train::{mean_error, train_detector, TrainReport};

use crate::error::{Error, Result};
use crate::keypoints::{Frame, KeypointSet};
use crate::simenv::Image;

/// Namespace of detector parameters inside checkpoints.
pub const PARAM_PREFIX: &str = "detector/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub keypoints: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of the hidden convolutions; the last layer emits `keypoints` channels.
    pub channels: Vec<usize>,
    /// One stride per convolution (hidden layers plus the output layer).
    pub strides: Vec<usize>,
    pub kernel: usize,
    /// Heatmap standard deviation in image pixels.
    pub sigma: f64,
    /// Training starts from this wider heatmap and narrows to `sigma`.
    pub sigma_start: f64,
    /// Fraction of training steps spent narrowing the heatmap.
    pub anneal_fraction: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    /// Wall-clock cap on training in seconds; 0 disables it.
    pub time_budget_secs: u64,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            keypoints: 8,
            height: 64,
            width: 64,
            channels: vec![16, 16],
            strides: vec![2, 2, 1],
            kernel: 3,
            sigma: 2.0,
            sigma_start: 8.0,
            anneal_fraction: 0.5,
            learning_rate: 2e-3,
            batch_size: 16,
            steps: 6000,
            time_budget_secs: 840,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn feature_extents(&self) -> (usize, usize) {
        let s: usize = self.strides.iter().product();
        (self.height / s, self.width / s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.strides.len() != self.channels.len() + 1 {
            return bad(format!("{} strides for {} convolutions", self.strides.len(), self.channels.len() + 1));
        }
        if self.keypoints == 0 || self.kernel % 2 == 0 || self.strides.contains(&0) {
            return bad("keypoints must be positive, kernel odd, strides positive".into());
        }
        // Every layer must divide its input exactly so the image/feature mapping is exact.
        let (mut h, mut w) = (self.height, self.width);
        for &s in &self.strides {
            if h % s != 0 || w % s != 0 || h < self.kernel || w < self.kernel {
                return bad(format!("{}x{} is not divisible through strides {:?}", self.height, self.width, self.strides));
            }
            h /= s;
            w /= s;
        }
        if !(self.sigma > 0.0 && self.sigma_start >= self.sigma) {
            return bad("sigma must be positive and no larger than sigma_start".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        Ok(())
    }
}

/// `K` maps over the feature lattice for one image, row-major per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<Real>,
    pub source: Option<String>,
}

impl FeatureMap {
    pub fn channel(&self, k: usize) -> &[Real] {
        let n = self.height * self.width;
        &self.values[k * n..(k + 1) * n]
    }
}

/// Per-keypoint Gaussian maps on an `H × W` pixel lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianHeatmap {
    pub height: usize,
    pub width: usize,
    pub sigma: f64,
    /// `[K, H·W]` row-major.
    pub channels: Vec<Vec<f64>>,
}

impl GaussianHeatmap {
    /// Channel sum.
    pub fn total(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.height * self.width];
        for ch in &self.channels {
            out.iter_mut().zip(ch).for_each(|(o, v)| *o += v);
        }
        out
    }
}

/// Lattice coordinates `[(r, c)]` of an `h × w` grid as an `[h·w, 2]` array.
fn lattice(h: usize, w: usize) -> Array {
    let data = (0..h * w).flat_map(|i| [(i / w) as Real, (i % w) as Real]).collect();
    Array::new([h * w, 2], data).expect("lattice shape")
}

/// Spatial-softmax expectation: `logits: [m, h·w] -> [m, 2]` coordinates on
/// the feature lattice.
pub fn expected_coordinates_var(tape: &mut Tape, logits: Var, h: usize, w: usize) -> Result<Var> {
    let p = tape.softmax(logits, 1)?;
    let grid = tape.constant(lattice(h, w))?;
    Ok(tape.matmul(p, grid)?)
}

/// Feature-domain keypoints of a feature map.
pub fn expected_coordinates(fm: &FeatureMap) -> Result<KeypointSet> {
    let mut tape = Tape::inference();
    let logits = tape.constant(Array::new([fm.channels, fm.height * fm.width], fm.values.clone())?)?;
    let c = expected_coordinates_var(&mut tape, logits, fm.height, fm.width)?;
    Ok(to_keypoints(tape.value(c), Frame::Current))
}

/// Scales feature-lattice coordinates to image pixels: `x = H·x′/H′`, `y = W·y′/W′`.
pub fn map_to_image(coords: &KeypointSet, config: &DetectorConfig) -> KeypointSet {
    let (fh, fw) = config.feature_extents();
    coords.scaled(config.height as f64 / fh as f64, config.width as f64 / fw as f64)
}

fn to_keypoints(a: &Array, frame: Frame) -> KeypointSet {
    KeypointSet::new(a.data().chunks(2).map(|c| [c[0] as f64, c[1] as f64]).collect(), frame)
}

fn coords_array(kps: &KeypointSet) -> Result<Array> {
    Ok(Array::new(
        [kps.len(), 2],
        kps.points.iter().flat_map(|p| [p[0] as Real, p[1] as Real]).collect(),
    )?)
}

pub fn render_gaussian(kps: &KeypointSet, sigma: f64, height: usize, width: usize) -> Result<GaussianHeatmap> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("sigma {sigma} must be positive")));
    }
    let mut tape = Tape::inference();
    let c = tape.constant(coords_array(kps)?)?;
    let maps = tape.gaussian_maps(c, height, width, sigma as Real)?;
    let channels = tape
        .value(maps)
        .data()
        .chunks(height * width)
        .map(|ch| ch.iter().map(|&v| v as f64).collect())
        .collect();
    Ok(GaussianHeatmap {
        height,
        width,
        sigma,
        channels,
    })
}

/// Mean over channels and pixels of the squared difference between the
/// per-keypoint Gaussian maps of `predicted: [m, 2]` and `truth: [m, 2]`.
pub fn detector_loss_var(tape: &mut Tape, predicted: Var, truth: Var, sigma: f64, h: usize, w: usize) -> Result<Var> {
    let a = tape.gaussian_maps(predicted, h, w, sigma as Real)?;
    let b = tape.gaussian_maps(truth, h, w, sigma as Real)?;
    let d = tape.sub(a, b)?;
    let sq = tape.square(d)?;
    Ok(tape.mean(sq)?)
}

pub fn detector_loss(predicted: &KeypointSet, truth: &KeypointSet, config: &DetectorConfig) -> Result<f64> {
    predicted.ensure_same_len(truth)?;
    let mut tape = Tape::inference();
    let p = tape.constant(coords_array(predicted)?)?;
    let t = tape.constant(coords_array(truth)?)?;
    let l = detector_loss_var(&mut tape, p, t, config.sigma, config.height, config.width)?;
    Ok(tape.value(l).data()[0] as f64)
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    kernel: ParamId,
    bias: ParamId,
    stride: usize,
}

/// Convolution stack plus spatial-softmax readout.
#[derive(Clone, Debug)]
pub struct Detector {
    config: DetectorConfig,
    store: ParamStore,
    convs: Vec<Conv>,
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        let mut widths = vec![1];
        widths.extend(&config.channels);
        widths.push(config.keypoints);
        let k = config.kernel;
        for (i, pair) in widths.windows(2).enumerate() {
            let (cin, cout) = (pair[0], pair[1]);
            let kernel = store.insert_glorot(
                format!("conv{i}/kernel"),
                &[cout, cin, k, k],
                cin * k * k,
                cout * k * k,
                &mut rng,
            )?;
            let bias = store.insert_zeros(format!("conv{i}/bias"), &[cout])?;
            convs.push(Conv {
                kernel,
                bias,
                stride: config.strides[i],
            });
        }
        Ok(Detector { config, store, convs })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        if (img.height, img.width) != (self.config.height, self.config.width) {
            return Err(Error::ImageExtent {
                got: (img.height, img.width),
                expected: (self.config.height, self.config.width),
            });
        }
        Ok(())
    }

    /// Stacks images into a `[n, 1, H, W]` array.
    pub fn batch(&self, images: &[&Image]) -> Result<Array> {
        if images.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut data = Vec::with_capacity(images.len() * self.config.height * self.config.width);
        for img in images {
            self.check_image(img)?;
            data.extend(img.pixels.iter().map(|&v| v as Real));
        }
        Ok(Array::new([images.len(), 1, self.config.height, self.config.width], data)?)
    }

    /// Conv stack on `[n, 1, H, W]`; returns `[n·K, H′·W′]` logits.
    pub fn features_var(&self, tape: &mut Tape, images: Var) -> Result<Var> {
        let n = tape.value(images).shape()[0];
        let mut x = images;
        for (i, conv) in self.convs.iter().enumerate() {
            let k = tape.param(&self.store, conv.kernel);
            let b = tape.param(&self.store, conv.bias);
            x = tape.conv2d(x, k, Some(b), conv.stride, Padding::Same)?;
            if i + 1 < self.convs.len() {
                x = tape.relu(x)?;
            }
        }
        let (fh, fw) = self.config.feature_extents();
        Ok(tape.reshape(x, &[n * self.config.keypoints, fh * fw])?)
    }

    /// Image-domain coordinates `[n·K, 2]` for a batch.
    pub fn coordinates_var(&self, tape: &mut Tape, images: Var) -> Result<Var> {
        let logits = self.features_var(tape, images)?;
        let (fh, fw) = self.config.feature_extents();
        let c = expected_coordinates_var(tape, logits, fh, fw)?;
        let sx = self.config.height as Real / fh as Real;
        let sy = self.config.width as Real / fw as Real;
        Ok(tape.scale_cols(c, &[sx, sy])?)
    }

    pub fn extract_features(&self, image: &Image) -> Result<FeatureMap> {
        let mut tape = Tape::inference();
        let x = tape.constant(self.batch(&[image])?)?;
        let f = self.features_var(&mut tape, x)?;
        let (fh, fw) = self.config.feature_extents();
        Ok(FeatureMap {
            channels: self.config.keypoints,
            height: fh,
            width: fw,
            values: tape.value(f).data().to_vec(),
            source: None,
        })
    }

    /// Image-domain keypoints; records no gradients.
    pub fn detect(&self, image: &Image) -> Result<KeypointSet> {
        Ok(self.detect_batch(&[image])?.remove(0))
    }

    pub fn detect_batch(&self, images: &[&Image]) -> Result<Vec<KeypointSet>> {
        let mut tape = Tape::inference();
        let x = tape.constant(self.batch(images)?)?;
        let c = self.coordinates_var(&mut tape, x)?;
        let k = self.config.keypoints;
        Ok(tape
            .value(c)
            .data()
            .chunks(2 * k)
            .map(|chunk| KeypointSet::new(chunk.chunks(2).map(|p| [p[0] as f64, p[1] as f64]).collect(), Frame::Current))
            .collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let entries: Vec<(String, &Array)> = self
            .store
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

    /// Rebuilds a detector for `config` and fills it from a checkpoint.
    pub fn from_bytes(config: DetectorConfig, bytes: &[u8]) -> Result<Self> {
        let mut det = Detector::new(config)?;
        let entries = diffcore::checkpoint::read_entries(bytes)?;
        diffcore::checkpoint::load_into(&mut det.store, &entries, PARAM_PREFIX)?;
        Ok(det)
    }

    pub fn load(config: DetectorConfig, path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_bytes(config, &std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(h: usize, w: usize, values: Vec<Real>) -> FeatureMap {
        FeatureMap {
            channels: values.len() / (h * w),
            height: h,
            width: w,
            values,
            source: None,
        }
    }

    #[test]
    fn uniform_channel_gives_lattice_centroid() {
        let c = expected_coordinates(&fm(16, 12, vec![0.3; 192])).unwrap();
        assert!((c.points[0][0] - 7.5).abs() < 1e-6 && (c.points[0][1] - 5.5).abs() < 1e-6);
    }

    #[test]
    fn saturated_spike_and_symmetric_pair() {
        let mut v = vec![0.0; 16 * 16];
        v[3 * 16 + 5] = 50.0;
        let c = expected_coordinates(&fm(16, 16, v)).unwrap();
        assert!((c.points[0][0] - 3.0).abs() < 1e-3 && (c.points[0][1] - 5.0).abs() < 1e-3);
        let mut v = vec![0.0; 16 * 16];
        v[2 * 16 + 2] = 50.0;
        v[2 * 16 + 8] = 50.0;
        let c = expected_coordinates(&fm(16, 16, v)).unwrap();
        assert!((c.points[0][0] - 2.0).abs() < 1e-6 && (c.points[0][1] - 5.0).abs() < 1e-6);
    }

    #[test]
    fn interior_spike_translates() {
        let spike = |r: usize, c: usize| {
            let mut v = vec![0.0; 32 * 32];
            v[r * 32 + c] = 40.0;
            expected_coordinates(&fm(32, 32, v)).unwrap().points[0]
        };
        let a = spike(12, 14);
        let b = spike(15, 13);
        assert!((b[0] - a[0] - 3.0).abs() < 1e-6 && (b[1] - a[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn image_mapping() {
        let cfg = DetectorConfig::default();
        let k = KeypointSet::new(vec![[8.0, 0.0], [0.0, 0.0], [15.0, 3.5]], Frame::Current);
        let m = map_to_image(&k, &cfg);
        assert_eq!(m.points, vec![[32.0, 0.0], [0.0, 0.0], [60.0, 14.0]]);
        let same = DetectorConfig {
            strides: vec![1, 1, 1],
            ..cfg
        };
        assert_eq!(map_to_image(&k, &same), k);
    }

    #[test]
    fn gaussian_values() {
        let k = KeypointSet::new(vec![[10.0, 20.0], [10.0, 20.0]], Frame::Current);
        let g = render_gaussian(&k, 2.0, 32, 32).unwrap();
        assert_eq!(g.channels[0][10 * 32 + 20], 1.0);
        assert!((g.channels[0][12 * 32 + 20] - (-0.5f64).exp()).abs() < 1e-9);
        assert_eq!(g.total()[10 * 32 + 20], 2.0);
        assert!(render_gaussian(&k, 0.0, 32, 32).is_err());
        // Off-lattice center: the maximum sits at the nearest cell.
        let off = KeypointSet::new(vec![[4.3, 7.8]], Frame::Current);
        let g = render_gaussian(&off, 1.5, 16, 16).unwrap();
        let argmax = (0..256).max_by(|&a, &b| g.channels[0][a].total_cmp(&g.channels[0][b])).unwrap();
        assert_eq!(argmax, 4 * 16 + 8);
    }

    #[test]
    fn feature_extents_and_finiteness() {
        let det = Detector::new(DetectorConfig::default()).unwrap();
        let blank = Image::blank(64, 64);
        let f = det.extract_features(&blank).unwrap();
        assert_eq!((f.channels, f.height, f.width), (8, 16, 16));
        assert!(f.values.iter().all(|v| v.is_finite()));
        let mut poked = blank.clone();
        poked.pixels[40 * 64 + 21] = 1.0;
        assert_ne!(det.extract_features(&poked).unwrap().values, f.values);
        assert!(matches!(det.detect(&Image::blank(32, 64)), Err(Error::ImageExtent { .. })));
    }

    #[test]
    fn detect_is_deterministic() {
        let det = Detector::new(DetectorConfig::default()).unwrap();
        let mut img = Image::blank(64, 64);
        img.pixels[1000] = 1.0;
        let a = det.detect(&img).unwrap();
        assert_eq!(a.len(), 8);
        assert_eq!(a, det.detect(&img).unwrap());
        assert!(a.points.iter().all(|p| (0.0..64.0).contains(&p[0]) && (0.0..64.0).contains(&p[1])));
    }

    #[test]
    fn config_rejects_inexact_mapping() {
        let cfg = DetectorConfig {
            height: 62,
            ..DetectorConfig::default()
        };
        assert!(Detector::new(cfg).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let det = Detector::new(DetectorConfig::default()).unwrap();
        let bytes = det.to_bytes();
        let back = Detector::from_bytes(DetectorConfig { seed: 9, ..DetectorConfig::default() }, &bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
    }
}
