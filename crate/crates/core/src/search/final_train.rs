use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Architecture;
use crate::data::{Batches, DataSplits};
use crate::error::{Error, Result};
use crate::population::Member;
use crate::supernet::{assemble, ChannelPlan, GateMode, StepSettings, WeightStore};
use crate::tensor::{BnMode, LrSchedule, SgdState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            warmup_epochs: 1,
            batch_size: 32,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 4e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinalReport {
    /// Top-1 on the held-out split after the last epoch.
    pub accuracy: f64,
    pub epochs: Vec<EpochMetrics>,
}

/// Rows of the training split used to recalibrate BN before evaluation.
pub const CALIBRATION_SAMPLES: usize = 512;

/// Trains the single-path network of `arch` from fresh weights with
/// warmup plus cosine decay. Each evaluation uses running statistics
/// recalibrated on the training split.
pub fn train_final(arch: &Architecture, plan: &ChannelPlan, data: &DataSplits, cfg: &TrainConfig) -> Result<FinalReport> {
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::Config("batch_size, lr and momentum must be in range".into()));
    }
    let members: Vec<Vec<Member>> = arch.cells.iter().map(|c| vec![Member::new(*c, 0.0, 0)]).collect();
    let mut store = WeightStore::<f32>::new(cfg.seed ^ 0x4649_4e41);
    let mut net = assemble(&members, plan, &mut store, GateMode::FullSum, 0)?;
    let paths = vec![0; members.len()];
    let schedule = LrSchedule::new(cfg.lr, cfg.warmup_epochs, cfg.epochs);
    let mut batches = Batches::new(data.train.len(), cfg.batch_size, cfg.seed ^ 0x4241_5443)?;
    let mut opt = SgdState::new(cfg.momentum, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr_at(epoch)?;
        let s = StepSettings {
            steps: batches.per_epoch(),
            lr,
            alpha_lr: 0.0,
            lambda: 0.0,
        };
        let losses = net.train_steps(&data.train, &mut batches, &mut opt, &s, &mut rng)?;
        net.recalibrate(&data.train, CALIBRATION_SAMPLES, Some(&paths))?;
        epochs.push(EpochMetrics {
            epoch,
            lr,
            train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            val_accuracy: net.accuracy(&data.val, cfg.batch_size, BnMode::Eval, Some(&paths))?,
        });
    }
    let accuracy = match epochs.last() {
        Some(m) => m.val_accuracy,
        None => {
            net.recalibrate(&data.train, CALIBRATION_SAMPLES, Some(&paths))?;
            net.accuracy(&data.val, cfg.batch_size, BnMode::Eval, Some(&paths))?
        }
    };
    Ok(FinalReport { accuracy, epochs })
}
