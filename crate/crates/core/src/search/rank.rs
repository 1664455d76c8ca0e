use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifacts::round_sig9;
use crate::data::{eval_batches, synth_relational, Batches, DataSplits, Dataset, RelationalSpec};
use crate::error::{Error, Result};
use crate::supernet::{count_correct, scaled_alpha_grad, softmax, ConvBn, Init, WeightStore};
use crate::tensor::{BnMode, Element, Graph, Param, SgdState, Tensor, Var};

/// A stack of `depth` 3x3 conv-BN-ReLU blocks of one width, then global
/// pooling and a linear classifier.
pub struct PlainNet<T> {
    pub depth: usize,
    blocks: Vec<ConvBn<T>>,
    head_w: Param<T>,
    head_b: Param<T>,
}

impl<T: Element> PlainNet<T> {
    pub fn new(store: &mut WeightStore<T>, name: &str, in_channels: usize, width: usize, depth: usize, classes: usize) -> Result<Self> {
        if depth == 0 || width == 0 {
            return Err(Error::Config("plain nets need positive depth and width".into()));
        }
        let blocks = (0..depth)
            .map(|d| {
                let c_in = if d == 0 { in_channels } else { width };
                ConvBn::new(store, &format!("{name}/b{d}"), c_in, width, 3, 1, 1, true)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PlainNet {
            depth,
            blocks,
            head_w: store.get_or_init(&format!("{name}/fc.w"), &[classes, width], Init::Normal {
                std: (1.0 / width as f64).sqrt(),
            })?,
            head_b: store.get_or_init(&format!("{name}/fc.b"), &[classes], Init::Zeros)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, bn: BnMode) -> Result<Var> {
        let mut h = x;
        for b in &self.blocks {
            h = b.forward(g, h, bn)?;
        }
        let pooled = g.global_avg_pool(h)?;
        let w = g.param(&self.head_w);
        let b = g.param(&self.head_b);
        g.linear(pooled, w, b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankConfig {
    /// Depths of the three nets, expected to rank from worst to best.
    pub depths: Vec<usize>,
    pub width: usize,
    pub data: RelationalSpec,
    pub standalone_epochs: usize,
    pub max_epochs: usize,
    pub seeds: Vec<u64>,
    /// Initial scores are uniform in `[-alpha_init, alpha_init]`.
    pub alpha_init: f64,
    pub alpha_lr: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for RankConfig {
    fn default() -> Self {
        RankConfig {
            depths: vec![2, 4, 6],
            width: 8,
            data: RelationalSpec {
                per_class: 300,
                height: 6,
                width: 16,
                max_offset: 12,
                noise: 0.05,
                seed: 0,
            },
            standalone_epochs: 10,
            max_epochs: 10,
            seeds: (0..5).collect(),
            alpha_init: 3e-3,
            alpha_lr: 0.1,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 4e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankRow {
    pub seed: u64,
    pub initial_alphas: Vec<f64>,
    pub final_alphas: Vec<f64>,
    /// First epoch from which the score order matches the standalone order
    /// through the horizon (0 is the initialization).
    pub rank_epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankReport {
    pub standalone: Vec<f64>,
    /// False when the standalone accuracies are not strictly ordered; no
    /// rows are produced then.
    pub valid: bool,
    pub rows: Vec<RankRow>,
}

impl RankReport {
    pub fn recovered_within(&self, epochs: usize) -> usize {
        self.rows.iter().filter(|r| r.rank_epoch.is_some_and(|e| e <= epochs)).count()
    }

    /// `seed,alpha1,...,rank_epoch` with the initial scores; an unrecovered
    /// ranking leaves `rank_epoch` empty.
    pub fn to_csv(&self, provenance: &str) -> String {
        let n = self.standalone.len();
        let mut out = format!("# {provenance}\n");
        let _ = write!(out, "# standalone_accuracy");
        for a in &self.standalone {
            let _ = write!(out, ",{}", round_sig9(*a));
        }
        let _ = writeln!(out, "{}", if self.valid { "" } else { ",invalid" });
        out.push_str("seed");
        for i in 1..=n {
            let _ = write!(out, ",alpha{i}");
        }
        out.push_str(",rank_epoch\n");
        for r in &self.rows {
            let _ = write!(out, "{}", r.seed);
            for a in &r.initial_alphas {
                let _ = write!(out, ",{}", round_sig9(*a));
            }
            let _ = writeln!(out, ",{}", r.rank_epoch.map_or(String::new(), |e| e.to_string()));
        }
        out
    }
}

fn order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    idx
}

fn accuracy<T: Element>(nets: &[&PlainNet<T>], weights: &[f64], data: &Dataset, batch_size: usize) -> Result<f64> {
    let mut correct = 0;
    for idx in eval_batches(data.len(), batch_size) {
        let (x, labels) = data.batch::<T>(&idx);
        let mut g = Graph::new();
        let xv = g.input(x);
        let mut out: Option<Var> = None;
        for (net, &w) in nets.iter().zip(weights) {
            let l = net.forward(&mut g, xv, BnMode::Eval)?;
            let l = g.scale_by(l, T::from_f64_lossy(w))?;
            out = Some(match out {
                Some(acc) => g.add(acc, l)?,
                None => l,
            });
        }
        correct += count_correct(g.value(out.expect("at least one net")), &labels);
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Held-out accuracy of a plain net of `depth` trained alone.
pub fn plain_net_accuracy(depth: usize, data: &DataSplits, cfg: &RankConfig, seed: u64) -> Result<f64> {
    let (c, _, _) = data.train.image_shape();
    let mut store = WeightStore::<f32>::new(seed ^ depth as u64);
    let net = PlainNet::new(&mut store, "solo", c, cfg.width, depth, data.train.classes)?;
    let mut batches = Batches::new(data.train.len(), cfg.batch_size, seed)?;
    let mut opt = SgdState::new(cfg.momentum, cfg.weight_decay);
    let schedule = crate::tensor::LrSchedule::new(cfg.lr, 0, cfg.standalone_epochs.max(1));
    for epoch in 0..cfg.standalone_epochs {
        let lr = schedule.lr_at(epoch)?;
        for _ in 0..batches.per_epoch() {
            let idx = batches.next().expect("endless batches");
            let (x, labels) = data.train.batch::<f32>(&idx);
            let mut g = Graph::new();
            let xv = g.input(x);
            let logits = net.forward(&mut g, xv, BnMode::Train)?;
            let loss = g.softmax_cross_entropy(logits, &labels)?;
            g.backward(loss)?;
            opt.step(&g.params(), lr)?;
        }
    }
    accuracy(&[&net], &[1.0], &data.val, cfg.batch_size)
}

/// Trains the nets as parallel paths mixed by softmax scores and records,
/// after every epoch, whether the score order matches `target`.
fn score_ranking(data: &DataSplits, cfg: &RankConfig, seed: u64, target: &[usize]) -> Result<RankRow> {
    let (c, _, _) = data.train.image_shape();
    let mut store = WeightStore::<f32>::new(seed);
    let nets = cfg
        .depths
        .iter()
        .enumerate()
        .map(|(i, &d)| PlainNet::new(&mut store, &format!("N{i}"), c, cfg.width, d, data.train.classes))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut alpha: Vec<f64> = (0..nets.len())
        .map(|_| rng.random_range(-cfg.alpha_init..=cfg.alpha_init))
        .collect();
    let initial_alphas = alpha.clone();
    let mut batches = Batches::new(data.train.len(), cfg.batch_size, seed ^ 0x4241_5443)?;
    let mut opt = SgdState::new(cfg.momentum, cfg.weight_decay);
    let mut matches = vec![order(&alpha) == target];
    let mut n = 0u64;
    let mut participation = vec![0u64; nets.len()];
    for _ in 0..cfg.max_epochs {
        for _ in 0..batches.per_epoch() {
            n += 1;
            participation.iter_mut().for_each(|p| *p += 1);
            let idx = batches.next().expect("endless batches");
            let (x, labels) = data.train.batch::<f32>(&idx);
            let p = softmax(&alpha);
            let mut g = Graph::new();
            let xv = g.input(x);
            let mut gates = Vec::with_capacity(nets.len());
            let mut out: Option<Var> = None;
            for (net, pk) in nets.iter().zip(&p) {
                let l = net.forward(&mut g, xv, BnMode::Train)?;
                let gate = g.input(Tensor::scalar(*pk as f32).with_requires_grad(true));
                gates.push(gate);
                let term = g.scale(l, gate)?;
                out = Some(match out {
                    Some(acc) => g.add(acc, term)?,
                    None => term,
                });
            }
            let loss = g.softmax_cross_entropy(out.expect("at least one net"), &labels)?;
            let grads = g.backward(loss)?;
            opt.step(&g.params(), cfg.lr)?;
            let gg: Vec<f64> = gates
                .iter()
                .map(|&v| grads.get(v).map_or(0.0, |s| f64::from(s[0])))
                .collect();
            for (a, d) in alpha.iter_mut().zip(scaled_alpha_grad(&p, &gg, &participation, n)) {
                *a -= cfg.alpha_lr * d;
            }
        }
        matches.push(order(&alpha) == target);
    }
    let rank_epoch = (0..matches.len()).find(|&e| matches[e..].iter().all(|&m| m));
    Ok(RankRow {
        seed,
        initial_alphas,
        final_alphas: alpha,
        rank_epoch,
    })
}

/// Verifies that the nets' standalone accuracies are strictly ordered, then
/// measures per seed how quickly mixed training recovers that order.
pub fn rank_test(cfg: &RankConfig) -> Result<RankReport> {
    if cfg.depths.len() < 2 || cfg.seeds.is_empty() || cfg.batch_size == 0 {
        return Err(Error::Config("rank test needs at least two nets, one seed and a batch size".into()));
    }
    let data = synth_relational(&cfg.data)?;
    let standalone = cfg
        .depths
        .iter()
        .map(|&d| plain_net_accuracy(d, &data, cfg, cfg.data.seed))
        .collect::<Result<Vec<_>>>()?;
    let target = order(&standalone);
    let valid = standalone.windows(2).all(|w| w[0] < w[1]);
    if !valid {
        return Ok(RankReport {
            standalone,
            valid,
            rows: Vec::new(),
        });
    }
    let rows = cfg
        .seeds
        .iter()
        .map(|&s| score_ranking(&data, cfg, s, &target))
        .collect::<Result<Vec<_>>>()?;
    Ok(RankReport { standalone, valid, rows })
}
