//! Image classification datasets: IDX and CIFAR binary loaders, a seeded
//! synthetic generator, and shuffled mini-batch iteration.

mod cifar;
mod idx;
mod synth;

pub use cifar::{load_cifar_binary, parse_cifar_binary, CIFAR_RECORD_BYTES};
pub use idx::{load_idx, parse_idx};
pub use synth::{synth_dataset, synth_relational, RelationalSpec, SynthSpec};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    Idx,
    CifarBinary,
    Synthetic { seed: u64, spec: String },
}

/// Per-channel standardization applied at load time.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Vec<f32>,
    labels: Vec<usize>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub split: Split,
    pub provenance: Provenance,
    pub norm: Normalization,
}

impl Dataset {
    /// Builds a dataset from raw pixels, standardizing each channel by its
    /// own mean and standard deviation.
    #[allow(clippy::too_many_arguments)]
    pub fn from_raw(
        mut images: Vec<f32>,
        labels: Vec<usize>,
        channels: usize,
        height: usize,
        width: usize,
        classes: usize,
        split: Split,
        provenance: Provenance,
    ) -> Result<Self> {
        let plane = height * width;
        if images.len() != labels.len() * channels * plane {
            return Err(Error::invalid(format!(
                "{} pixels for {} images of {channels}x{height}x{width}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
        }
        let n = labels.len();
        let mut mean = vec![0f32; channels];
        let mut std = vec![1f32; channels];
        if n > 0 {
            for c in 0..channels {
                let vals = || (0..n).flat_map(|i| images[(i * channels + c) * plane..][..plane].iter().copied());
                let count = (n * plane) as f64;
                let m = vals().map(f64::from).sum::<f64>() / count;
                let v = vals().map(|x| (f64::from(x) - m).powi(2)).sum::<f64>() / count;
                mean[c] = m as f32;
                std[c] = if v > 1e-12 { v.sqrt() as f32 } else { 1.0 };
            }
            for i in 0..n {
                for c in 0..channels {
                    for p in &mut images[(i * channels + c) * plane..][..plane] {
                        *p = (*p - mean[c]) / std[c];
                    }
                }
            }
        }
        Ok(Dataset {
            images,
            labels,
            channels,
            height,
            width,
            classes,
            split,
            provenance,
            norm: Normalization { mean, std },
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let sz = self.channels * self.height * self.width;
        &self.images[i * sz..][..sz]
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    /// Gathers `indices` into an NCHW tensor plus labels.
    pub fn batch<T: Element>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.channels * self.height * self.width);
        for &i in indices {
            data.extend(self.image(i).iter().map(|&v| T::from_f32(v).unwrap()));
        }
        let t = Tensor::new(vec![indices.len(), self.channels, self.height, self.width], data)
            .expect("batch shape");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    fn subset(&self, indices: &[usize], split: Split) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.channels * self.height * self.width);
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split,
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            images: Vec::new(),
            labels: Vec::new(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            classes: self.classes,
            split: self.split,
            provenance: self.provenance.clone(),
            norm: self.norm.clone(),
        }
    }

    /// Stratified, seeded split: `train_fraction` of each class goes to the
    /// first part (labelled `Train`), the rest to `Val`. Disjoint and exhaustive.
    pub fn split_stratified(&self, train_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut train, mut val) = (Vec::new(), Vec::new());
        for c in 0..self.classes {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            idx.shuffle(&mut rng);
            let cut = (idx.len() as f64 * train_fraction).round() as usize;
            train.extend_from_slice(&idx[..cut]);
            val.extend_from_slice(&idx[cut..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        (self.subset(&train, Split::Train), self.subset(&val, Split::Val))
    }
}

/// A train/validation pair.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSplits {
    pub train: Dataset,
    pub val: Dataset,
}

/// Endless shuffled mini-batches of indices. Each epoch is a fresh
/// permutation; a trailing partial batch is dropped.
pub struct Batches {
    n: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
}

impl Batches {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if n == 0 || batch_size == 0 {
            return Err(Error::invalid("batching needs a non-empty dataset and batch size"));
        }
        let mut b = Batches {
            n,
            batch_size: batch_size.min(n),
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
        };
        b.reshuffle();
        Ok(b)
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub fn per_epoch(&self) -> usize {
        self.n / self.batch_size
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }
}

impl Iterator for Batches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.cursor + self.batch_size > self.n {
            self.epoch += 1;
            self.reshuffle();
        }
        let out = self.order[self.cursor..self.cursor + self.batch_size].to_vec();
        self.cursor += self.batch_size;
        Some(out)
    }
}

/// Contiguous, unshuffled evaluation batches covering every sample once.
pub fn eval_batches(n: usize, batch_size: usize) -> impl Iterator<Item = Vec<usize>> {
    let bs = batch_size.max(1);
    (0..n.div_ceil(bs)).map(move |b| (b * bs..((b + 1) * bs).min(n)).collect())
}
