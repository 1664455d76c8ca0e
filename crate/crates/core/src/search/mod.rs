//! Second-stage search inside an evolved search space: a differentiable
//! searcher with an expected-MAdds penalty, a single-path one-shot random
//! searcher, final training of the derived network and the ranking test.

mod final_train;
mod rank;

pub use final_train::{train_final, EpochMetrics, FinalReport, TrainConfig};
pub use rank::{plain_net_accuracy, rank_test, PlainNet, RankConfig, RankReport, RankRow};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifacts::{from_json_bytes, to_canonical_json};
use crate::data::{Batches, DataSplits};
use crate::error::{Error, Result};
use crate::genome::{madds, CellGenome, Genes};
use crate::population::{Member, SearchSpace, SpaceMeta};
use crate::supernet::{assemble, ChannelPlan, GateMode, PathChoice, StepSettings, Supernet, WeightStore};
use crate::tensor::{BnMode, Graph, LrSchedule, SgdState, Tensor};

/// One cell per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub cells: Vec<CellGenome>,
    pub total_madds: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchJson {
    version: u32,
    layers: Vec<Genes>,
    total_madds: u64,
    meta: SpaceMeta,
}

pub const ARCHITECTURE_VERSION: u32 = 1;

impl Architecture {
    pub fn new(cells: Vec<CellGenome>, plan: &ChannelPlan) -> Result<Self> {
        let genes: Vec<Genes> = cells.iter().map(|c| c.genes).collect();
        let total_madds = total_madds(&genes, plan)?;
        Ok(Architecture { cells, total_madds })
    }

    pub fn genes(&self) -> Vec<Genes> {
        self.cells.iter().map(|c| c.genes).collect()
    }

    pub fn to_json(&self, meta: &SpaceMeta) -> String {
        to_canonical_json(&ArchJson {
            version: ARCHITECTURE_VERSION,
            layers: self.genes(),
            total_madds: self.total_madds,
            meta: meta.clone(),
        })
        .expect("architecture serializes")
    }

    /// Parses an architecture document and checks its cost against `plan`.
    pub fn from_json(bytes: &[u8], plan: &ChannelPlan) -> Result<(Self, SpaceMeta)> {
        let doc: ArchJson = from_json_bytes(bytes)?;
        if doc.version != ARCHITECTURE_VERSION {
            return Err(Error::Config(format!("unsupported architecture version {}", doc.version)));
        }
        let cells = doc
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, g)| CellGenome::new(g, crate::genome::GenomeId(i as u64)))
            .collect();
        let arch = Architecture::new(cells, plan)?;
        if arch.total_madds != doc.total_madds {
            return Err(Error::Config(format!(
                "architecture declares {} MAdds but costs {} under the configured plan",
                doc.total_madds, arch.total_madds
            )));
        }
        Ok((arch, doc.meta))
    }
}

/// Per-layer cell costs plus the 3x3 stem and the classifier.
pub fn total_madds(genes: &[Genes], plan: &ChannelPlan) -> Result<u64> {
    let shapes = plan.layer_shapes()?;
    if shapes.len() != genes.len() {
        return Err(Error::Config(format!("{} cells for a {}-layer plan", genes.len(), shapes.len())));
    }
    let cells: u64 = genes.iter().zip(&shapes).map(|(g, s)| madds(g, s)).sum();
    Ok(cells + plan.stem_madds() + plan.head_madds())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchAlgo {
    Gradient,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    /// Weight of the expected-MAdds penalty, per MAdd.
    pub lambda: f64,
    pub algo: SearchAlgo,
    /// Total-MAdds cap for the random searcher; `None` is unlimited.
    pub budget: Option<u64>,
    pub epochs: usize,
    pub candidates: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub lr: f64,
    /// Step size of the architecture scores.
    pub beta_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            lambda: 1e-8,
            algo: SearchAlgo::Gradient,
            budget: None,
            epochs: 10,
            candidates: 100,
            seed: 0,
            batch_size: 32,
            lr: 0.05,
            beta_lr: 0.1,
            momentum: 0.9,
            weight_decay: 4e-5,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be finite and non-negative", self.lambda)));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) || !(self.beta_lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("batch_size, lr, beta_lr and momentum must be in range".into()));
        }
        if self.budget == Some(0) {
            return Err(Error::Config("budget must be positive".into()));
        }
        Ok(())
    }
}

/// Cross-entropy, penalty and their sum for one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub cross_entropy: f64,
    pub penalty: f64,
    pub total: f64,
}

/// Evaluates `CE + lambda * E[MAdds]` on a batch with batch statistics,
/// leaving weights and running statistics untouched.
pub fn objective(net: &Supernet<f64>, x: &Tensor<f64>, labels: &[usize], lambda: f64) -> Result<Objective> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let f = net.forward::<ChaCha8Rng>(&mut g, xv, BnMode::Batch, PathChoice::Mixture)?;
    let ce = g.softmax_cross_entropy(f.logits, labels)?;
    let cross_entropy = g.value(ce)[0];
    let penalty = lambda * net.expected_madds();
    Ok(Objective {
        cross_entropy,
        penalty,
        total: cross_entropy + penalty,
    })
}

fn space_members(space: &SearchSpace) -> Result<Vec<Vec<Member>>> {
    if space.layers.is_empty() || space.layers.iter().any(Vec::is_empty) {
        return Err(Error::Config("search space has an empty layer".into()));
    }
    Ok(space
        .layers
        .iter()
        .map(|l| l.iter().map(|c| Member::new(c.genome, 0.0, 0)).collect())
        .collect())
}

fn derived(space: &SearchSpace, paths: &[usize], plan: &ChannelPlan) -> Result<Architecture> {
    let cells = space.layers.iter().zip(paths).map(|(l, &k)| l[k].genome).collect();
    Architecture::new(cells, plan)
}

/// Trains `net` for `epochs` epochs with a cosine learning rate.
fn train_epochs(
    net: &mut Supernet<f32>,
    data: &DataSplits,
    cfg: &SearchConfig,
    alpha_lr: f64,
    lambda: f64,
) -> Result<Vec<f64>> {
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    let mut batches = Batches::new(data.train.len(), cfg.batch_size, cfg.seed ^ 0x4241_5443)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4741_5445);
    let mut opt = SgdState::new(cfg.momentum, cfg.weight_decay);
    let schedule = LrSchedule::new(cfg.lr, 0, cfg.epochs);
    let mut losses = Vec::new();
    for epoch in 0..cfg.epochs {
        let s = StepSettings {
            steps: batches.per_epoch(),
            lr: schedule.lr_at(epoch)?,
            alpha_lr,
            lambda,
        };
        losses.extend(net.train_steps(&data.train, &mut batches, &mut opt, &s, &mut rng)?);
    }
    Ok(losses)
}

/// Result of a searcher.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub arch: Architecture,
    /// Chosen path index per layer.
    pub paths: Vec<usize>,
    pub losses: Vec<f64>,
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(0, |b, (i, x)| if *x > v[b] { i } else { b })
}

/// Learns per-layer architecture scores over the space's cells (starting
/// equal) jointly with the shared weights, then keeps each layer's argmax.
pub fn gradient_search(
    space: &SearchSpace,
    data: &DataSplits,
    plan: &ChannelPlan,
    cfg: &SearchConfig,
    store: &mut WeightStore<f32>,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    let members = space_members(space)?;
    let mut net = assemble(&members, plan, store, GateMode::FullSum, 0)?;
    let losses = train_epochs(&mut net, data, cfg, cfg.beta_lr, cfg.lambda)?;
    let paths: Vec<usize> = net.layers.iter().map(|l| argmax(&l.alpha)).collect();
    Ok(SearchOutcome {
        arch: derived(space, &paths, plan)?,
        paths,
        losses,
    })
}

/// One evaluated candidate of the random searcher.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub paths: Vec<usize>,
    pub total_madds: u64,
    pub accuracy: f64,
}

/// Every path tuple in lexicographic order.
pub fn enumerate_paths(k: usize, layers: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..layers {
        out = out
            .into_iter()
            .flat_map(|p| {
                (0..k).map(move |i| {
                    let mut q = p.clone();
                    q.push(i);
                    q
                })
            })
            .collect();
    }
    out
}

/// Trains the space's supernet with uniform single-path sampling, then
/// scores candidates by one-shot validation accuracy (batch statistics,
/// inherited weights) and returns the best one under the budget. When
/// `candidates >= K^L` every architecture is evaluated once.
pub fn random_search(
    space: &SearchSpace,
    data: &DataSplits,
    plan: &ChannelPlan,
    cfg: &SearchConfig,
    store: &mut WeightStore<f32>,
) -> Result<(SearchOutcome, Vec<Candidate>)> {
    cfg.validate()?;
    let members = space_members(space)?;
    let k = space.k();
    let layers = space.layers.len();
    let mut net = assemble(&members, plan, store, GateMode::UniformPath, 0)?;
    let losses = train_epochs(&mut net, data, cfg, 0.0, 0.0)?;

    let exhaustive = (k as u128).checked_pow(layers as u32).is_some_and(|n| cfg.candidates as u128 >= n);
    let pool: Vec<Vec<usize>> = if exhaustive {
        enumerate_paths(k, layers)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4341_4e44);
        (0..cfg.candidates)
            .map(|_| (0..layers).map(|_| rng.random_range(0..k)).collect())
            .collect()
    };
    let budget = cfg.budget.unwrap_or(u64::MAX);
    let mut min_madds = u64::MAX;
    let mut evaluated = Vec::new();
    for paths in pool {
        let arch = derived(space, &paths, plan)?;
        min_madds = min_madds.min(arch.total_madds);
        if arch.total_madds >= budget {
            continue;
        }
        let accuracy = net.accuracy(&data.val, cfg.batch_size, BnMode::Batch, Some(&paths))?;
        evaluated.push(Candidate {
            paths,
            total_madds: arch.total_madds,
            accuracy,
        });
    }
    let best = evaluated
        .iter()
        .enumerate()
        .fold(None::<usize>, |b, (i, c)| match b {
            Some(j) if evaluated[j].accuracy >= c.accuracy => Some(j),
            _ => Some(i),
        })
        .ok_or(Error::BudgetInfeasible { min_madds })?;
    let paths = evaluated[best].paths.clone();
    Ok((
        SearchOutcome {
            arch: derived(space, &paths, plan)?,
            paths,
            losses,
        },
        evaluated,
    ))
}

#[cfg(test)]
mod tests;
