//! Run configuration: one JSON document shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifacts::{from_json_bytes, sha256_hex, to_canonical_json};
use crate::data::{load_cifar_binary, load_idx, synth_dataset, DataSplits, SynthSpec};
use crate::error::{Error, Result};
use crate::evolution::{EvolutionConfig, Schedule};
use crate::search::{RankConfig, SearchConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic(SynthSpec),
    Idx { images: PathBuf, labels: PathBuf },
    Cifar { paths: Vec<PathBuf> },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic(SynthSpec::new(4, 100, 16, 16, 0))
    }
}

/// Numeric precision of training runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; it replaces the seed of every section.
    pub seed: u64,
    pub precision: Precision,
    pub dataset: DatasetSpec,
    pub evolution: EvolutionConfig,
    pub search: SearchConfig,
    pub train: TrainConfig,
    pub rank: RankConfig,
}

const VAL_FRACTION: f64 = 0.2;

impl RunConfig {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cfg: RunConfig = from_json_bytes(bytes)?;
        cfg.apply_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    fn apply_seed(&mut self) {
        self.evolution.seed = self.seed;
        self.search.seed = self.seed;
        self.train.seed = self.seed;
    }

    /// Range checks that do not need the dataset.
    pub fn validate(&self) -> Result<()> {
        if self.precision == Precision::F64 {
            return Err(Error::Config(
                "precision f64 is reserved for gradient verification; training runs in f32".into(),
            ));
        }
        let e = &self.evolution;
        if !(e.tau > 0.0 && e.tau <= 1.0) || !(0.0..=1.0).contains(&e.epsilon) {
            return Err(Error::Config(format!("tau {} / epsilon {} out of range", e.tau, e.epsilon)));
        }
        e.budget()?;
        self.search.validate()?;
        if let DatasetSpec::Synthetic(s) = &self.dataset {
            if s.classes < 2 {
                return Err(Error::Config("synthetic dataset needs at least two classes".into()));
            }
        }
        Ok(())
    }

    /// Content hash over the canonical form (defaults filled in).
    pub fn hash(&self) -> String {
        sha256_hex(to_canonical_json(self).expect("config serializes").as_bytes())
    }

    /// Loads the dataset and splits it into train and validation parts.
    pub fn load_data(&self) -> Result<DataSplits> {
        match &self.dataset {
            DatasetSpec::Synthetic(s) => synth_dataset(s),
            DatasetSpec::Idx { images, labels } => split(load_idx(images, labels)?, self.seed),
            DatasetSpec::Cifar { paths } => split(load_cifar_binary(paths)?, self.seed),
        }
    }

    /// Evolution schedule (and channel plan) for `data`.
    pub fn schedule(&self, data: &DataSplits) -> Result<Schedule> {
        self.evolution
            .resolve(data.train.len(), data.train.image_shape(), data.train.classes)
    }
}

fn split(all: crate::data::Dataset, seed: u64) -> Result<DataSplits> {
    let (train, val) = all.split_stratified(1.0 - VAL_FRACTION, seed);
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("dataset too small for a train/validation split".into()));
    }
    Ok(DataSplits { train, val })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        let cfg = RunConfig::from_bytes(b"{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn seed_propagates_and_changes_hash() {
        let a = RunConfig::from_bytes(br#"{"seed": 5}"#).unwrap();
        assert_eq!((a.evolution.seed, a.search.seed, a.train.seed), (5, 5, 5));
        assert_ne!(a.hash(), RunConfig::default().hash());
    }

    #[test]
    fn rejects_bad_values() {
        assert!(matches!(RunConfig::from_bytes(br#"{"evolution": {"tau": 0}}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_bytes(br#"{"bogus": 1}"#), Err(Error::Parse { .. })));
        assert!(RunConfig::from_bytes(br#"{"precision": "f64"}"#).is_err());
        assert!(RunConfig::from_bytes(br#"{"search": {"lambda": -1}}"#).is_err());
    }

    #[test]
    fn synthetic_dataset_section() {
        let cfg = RunConfig::from_bytes(
            br#"{"dataset": {"synthetic": {"classes": 3, "per_class": 10, "height": 8, "width": 8, "seed": 1}}}"#,
        )
        .unwrap();
        let d = cfg.load_data().unwrap();
        assert_eq!(d.train.len() + d.val.len(), 30);
    }
}
