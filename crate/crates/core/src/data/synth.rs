use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataSplits, Dataset, Provenance, Split};
use crate::error::{Error, Result};

/// Class-conditional Gaussian blobs. Class `c` has a prototype image (a
/// centered Gaussian bump whose per-channel amplitude is a class-specific
/// color); samples add isotropic noise whose norm is capped below half the
/// smallest prototype distance, so the nearest-prototype rule (an affine
/// classifier) separates the classes exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub seed: u64,
}

fn default_channels() -> usize {
    3
}

fn default_noise() -> f64 {
    0.1
}

impl SynthSpec {
    pub fn new(classes: usize, per_class: usize, height: usize, width: usize, seed: u64) -> Self {
        SynthSpec {
            classes,
            per_class,
            height,
            width,
            channels: default_channels(),
            noise: default_noise(),
            seed,
        }
    }
}

const NOISE_CAP: f64 = 0.45;

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn class_color(c: usize, classes: usize, channels: usize) -> Vec<f64> {
    if channels == 1 {
        return vec![-1.0 + 2.0 * c as f64 / (classes - 1) as f64];
    }
    let theta = 2.0 * PI * c as f64 / classes as f64;
    (0..channels)
        .map(|ch| (theta - 2.0 * PI * ch as f64 / channels as f64).cos())
        .collect()
}

pub fn synth_dataset(spec: &SynthSpec) -> Result<DataSplits> {
    if spec.classes < 2 || spec.per_class == 0 || spec.height == 0 || spec.width == 0 || spec.channels == 0 {
        return Err(Error::invalid(format!("degenerate synthetic spec {spec:?}")));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::invalid("noise must be finite and non-negative"));
    }
    let (ch, h, w) = (spec.channels, spec.height, spec.width);
    let plane = h * w;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let s = (h.max(w) as f64 / 4.0).max(0.5);
    let blob: Vec<f64> = (0..plane)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp()
        })
        .collect();
    let protos: Vec<Vec<f64>> = (0..spec.classes)
        .map(|c| {
            class_color(c, spec.classes, ch)
                .into_iter()
                .flat_map(|a| blob.iter().map(move |b| a * b))
                .collect()
        })
        .collect();
    let mut d_min = f64::INFINITY;
    for i in 0..protos.len() {
        for j in i + 1..protos.len() {
            let d = protos[i]
                .iter()
                .zip(&protos[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            d_min = d_min.min(d);
        }
    }
    if !(d_min > 0.0) {
        return Err(Error::invalid("class prototypes coincide"));
    }
    let cap = NOISE_CAP * d_min;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.classes * spec.per_class;
    let mut pixels = Vec::with_capacity(n * ch * plane);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..spec.per_class {
        for (c, proto) in protos.iter().enumerate() {
            let mut noise: Vec<f64> = (0..ch * plane)
                .map(|_| spec.noise * gauss(&mut rng))
                .collect();
            let norm = noise.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > cap {
                noise.iter_mut().for_each(|v| *v *= cap / norm);
            }
            pixels.extend(proto.iter().zip(&noise).map(|(p, e)| (p + e) as f32));
            labels.push(c);
        }
    }
    let provenance = Provenance::Synthetic {
        seed: spec.seed,
        spec: serde_json::to_string(spec).expect("spec serializes"),
    };
    let all = Dataset::from_raw(pixels, labels, ch, h, w, spec.classes, Split::Train, provenance)?;
    let (train, val) = all.split_stratified(0.8, spec.seed ^ 0x5eed_5eed);
    Ok(DataSplits { train, val })
}

/// Two-marker relational task. Channel 0 holds marker A and channel 1 marker
/// B on the same row; the label says whether B sits left (0) or right (1) of
/// A. Horizontal offsets are uniform in `1..=max_offset`, so telling the
/// classes apart needs a receptive field spanning the offset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationalSpec {
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub max_offset: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub seed: u64,
}

pub fn synth_relational(spec: &RelationalSpec) -> Result<DataSplits> {
    if spec.max_offset == 0 || spec.max_offset >= spec.width || spec.height == 0 || spec.per_class == 0 {
        return Err(Error::invalid(format!("degenerate relational spec {spec:?}")));
    }
    let (h, w) = (spec.height, spec.width);
    let plane = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pixels = Vec::with_capacity(2 * spec.per_class * 2 * plane);
    let mut labels = Vec::with_capacity(2 * spec.per_class);
    for _ in 0..spec.per_class {
        for class in 0..2 {
            let dx = rng.random_range(1..=spec.max_offset);
            let y = rng.random_range(0..h);
            let left = rng.random_range(0..w - dx);
            let (xa, xb) = if class == 1 { (left, left + dx) } else { (left + dx, left) };
            let mut img: Vec<f32> = (0..2 * plane)
                .map(|_| (spec.noise * gauss(&mut rng)) as f32)
                .collect();
            img[y * w + xa] += 1.0;
            img[plane + y * w + xb] += 1.0;
            pixels.extend(img);
            labels.push(class);
        }
    }
    let provenance = Provenance::Synthetic {
        seed: spec.seed,
        spec: serde_json::to_string(spec).expect("spec serializes"),
    };
    let all = Dataset::from_raw(pixels, labels, 2, h, w, 2, Split::Train, provenance)?;
    let (train, val) = all.split_stratified(0.8, spec.seed ^ 0x5eed_5eed);
    Ok(DataSplits { train, val })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let spec = SynthSpec::new(4, 25, 8, 8, 3);
        let a = synth_dataset(&spec).unwrap();
        assert_eq!(a, synth_dataset(&spec).unwrap());
        assert_eq!(a.train.len() + a.val.len(), 100);
        for c in 0..4 {
            let count = a.train.labels().iter().chain(a.val.labels()).filter(|&&l| l == c).count();
            assert_eq!(count, 25);
        }
        assert_eq!(a.train.len(), 80);
    }

    #[test]
    fn rejects_single_class() {
        assert!(synth_dataset(&SynthSpec::new(1, 10, 8, 8, 0)).is_err());
    }

    #[test]
    fn relational_labels_follow_marker_order() {
        let spec = RelationalSpec {
            per_class: 20,
            height: 6,
            width: 10,
            max_offset: 5,
            noise: 0.0,
            seed: 1,
        };
        let d = synth_relational(&spec).unwrap();
        for set in [&d.train, &d.val] {
            for i in 0..set.len() {
                let img = set.image(i);
                let argmax = |s: &[f32]| {
                    s.iter()
                        .enumerate()
                        .max_by(|a, b| a.1.total_cmp(b.1))
                        .unwrap()
                        .0
                        % 10
                };
                let (xa, xb) = (argmax(&img[..60]), argmax(&img[60..]));
                assert_eq!(set.labels()[i], usize::from(xb > xa));
            }
        }
    }
}
