//! The evolution loop: select K cells per layer, score them together in a
//! supernet, fold the learned scores back into the populations, breed, and
//! repeat. The output is the per-layer top-K search space.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifacts::{round_sig9, to_canonical_json, sha256_hex};
use crate::data::{Batches, Dataset};
use crate::error::{Error, Result};
use crate::genome::{madds, CellGenome, Genes, GenomeId, IdSource, LayerShape, MaddsBudget, MutationConstraints};
use crate::population::{init_populations, LayerPopulation, Member, SearchSpace};
use crate::supernet::{assemble, ChannelPlan, GateMode, StepSettings, WeightStore};
use crate::tensor::{LrSchedule, SgdState};

/// Which genome anchors early mutations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSpec {
    /// The inverted residual cell.
    Irb,
    None,
    Genome(Genes),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolutionConfig {
    pub k: usize,
    pub population: usize,
    pub tournament: usize,
    /// Offspring per layer per generation; `None` means K.
    pub n_offspring: Option<usize>,
    pub n_mut: usize,
    /// Supernet iterations per generation (`f`); `None` means one epoch.
    pub iterations_per_generation: Option<usize>,
    /// Total iterations (`T`); `None` means 40 epochs.
    pub total_iterations: Option<usize>,
    pub tau: f64,
    pub epsilon: f64,
    pub alpha_lr: f64,
    pub madds_max: Option<u64>,
    pub reference: ReferenceSpec,
    /// When false the reference never constrains mutation (it is still
    /// seeded into the populations).
    pub reference_schedule: bool,
    pub gate_mode: GateMode,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// `None` derives the six-layer desk plan from the dataset.
    pub plan: Option<ChannelPlan>,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            k: 4,
            population: 25,
            tournament: 5,
            n_offspring: None,
            n_mut: 1,
            iterations_per_generation: None,
            total_iterations: None,
            tau: 4.0 / 30.0,
            epsilon: 0.9,
            alpha_lr: 1e-3,
            madds_max: None,
            reference: ReferenceSpec::Irb,
            reference_schedule: true,
            gate_mode: GateMode::FullSum,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 4e-5,
            seed: 0,
            plan: None,
        }
    }
}

/// Config values with dataset-dependent defaults filled in.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub f: usize,
    pub total: usize,
    pub plan: ChannelPlan,
    pub n_offspring: usize,
}

impl Schedule {
    pub fn generations(&self) -> usize {
        self.total / self.f
    }
}

const DEFAULT_EPOCHS: usize = 40;

impl EvolutionConfig {
    pub fn reference_genes(&self) -> Option<Genes> {
        match &self.reference {
            ReferenceSpec::Irb => Some(Genes::INVERTED_RESIDUAL),
            ReferenceSpec::None => None,
            ReferenceSpec::Genome(g) => Some(*g),
        }
    }

    pub fn budget(&self) -> Result<MaddsBudget> {
        self.madds_max.map_or(Ok(MaddsBudget::UNLIMITED), MaddsBudget::new)
    }

    /// Checks ranges and resolves defaults against a training split of
    /// `train_len` images of shape `image`.
    pub fn resolve(&self, train_len: usize, image: (usize, usize, usize), classes: usize) -> Result<Schedule> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau {} outside (0, 1]", self.tau));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad(format!("epsilon {} outside [0, 1]", self.epsilon));
        }
        if self.k < 1 || self.population < self.k.max(2) || self.tournament < 2 || self.tournament > self.population {
            return bad(format!(
                "need P >= K >= 1, P >= 2 and 2 <= t <= P (K {}, P {}, t {})",
                self.k, self.population, self.tournament
            ));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) || !(self.alpha_lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return bad("batch_size, lr, alpha_lr and momentum must be in range".into());
        }
        if !(1..=8).contains(&self.n_mut) {
            return bad(format!("n_mut {} outside 1..=8", self.n_mut));
        }
        self.budget()?;
        let epoch = (train_len / self.batch_size.min(train_len.max(1))).max(1);
        let f = self.iterations_per_generation.unwrap_or(epoch);
        let total = self.total_iterations.unwrap_or(DEFAULT_EPOCHS * epoch);
        if f == 0 || total == 0 || total % f != 0 {
            return bad(format!("iterations per generation {f} must divide total iterations {total}"));
        }
        let n_offspring = self.n_offspring.unwrap_or(self.k);
        if n_offspring + self.k > self.population {
            return bad(format!("{n_offspring} offspring exceed P - K = {}", self.population - self.k));
        }
        let plan = match &self.plan {
            Some(p) => p.clone(),
            None => ChannelPlan::desk_default(image.0, image.1, image.2, classes),
        };
        if (plan.in_channels, plan.height, plan.width) != image || plan.classes != classes {
            return bad(format!("channel plan does not match the dataset ({image:?}, {classes} classes)"));
        }
        plan.layer_shapes()?;
        Ok(Schedule {
            f,
            total,
            plan,
            n_offspring,
        })
    }

    /// Stable content hash of the configuration.
    pub fn hash(&self) -> String {
        sha256_hex(to_canonical_json(self).expect("config serializes").as_bytes())
    }
}

/// True iff the reference constraint applies at `iteration` (first half of `total`).
pub fn reference_schedule(total: usize, iteration: usize) -> bool {
    2 * iteration < total
}

/// What a scorer reports for one generation.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationScores {
    /// Live scores per layer, for the write-back.
    pub alphas: Vec<Vec<(GenomeId, f64)>>,
    /// Updated participation counters per layer.
    pub participation: Vec<Vec<(GenomeId, u64)>>,
    pub losses: Vec<f64>,
}

/// Produces updated fitness scores for the sampled members.
pub trait Scorer {
    fn score(&mut self, sampled: &[Vec<Member>], steps: usize, generation: usize) -> Result<GenerationScores>;
}

/// Scores by training a weight-sharing supernet.
pub struct SupernetScorer<'a> {
    pub data: &'a Dataset,
    pub plan: ChannelPlan,
    pub store: WeightStore<f32>,
    pub gate_mode: GateMode,
    pub alpha_lr: f64,
    pub schedule: LrSchedule,
    opt: SgdState<f32>,
    batches: Batches,
    rng: ChaCha8Rng,
    iterations: u64,
}

const WEIGHT_STREAM: u64 = 0x5745_4947;
const BATCH_STREAM: u64 = 0x4241_5443;
const GATE_STREAM: u64 = 0x4741_5445;

impl<'a> SupernetScorer<'a> {
    pub fn new(cfg: &EvolutionConfig, sched: &Schedule, data: &'a Dataset) -> Result<Self> {
        Ok(SupernetScorer {
            data,
            plan: sched.plan.clone(),
            store: WeightStore::new(cfg.seed ^ WEIGHT_STREAM),
            gate_mode: cfg.gate_mode,
            alpha_lr: cfg.alpha_lr,
            schedule: LrSchedule::new(cfg.lr, 0, sched.generations()),
            opt: SgdState::new(cfg.momentum, cfg.weight_decay),
            batches: Batches::new(data.len(), cfg.batch_size, cfg.seed ^ BATCH_STREAM)?,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ GATE_STREAM),
            iterations: 0,
        })
    }
}

impl Scorer for SupernetScorer<'_> {
    fn score(&mut self, sampled: &[Vec<Member>], steps: usize, generation: usize) -> Result<GenerationScores> {
        let mut net = assemble(sampled, &self.plan, &mut self.store, self.gate_mode, self.iterations)?;
        let settings = StepSettings {
            steps,
            lr: self.schedule.lr_at(generation)?,
            alpha_lr: self.alpha_lr,
            lambda: 0.0,
        };
        let losses = net.train_steps(self.data, &mut self.batches, &mut self.opt, &settings, &mut self.rng)?;
        self.iterations = net.iterations;
        Ok(GenerationScores {
            alphas: net.extract_alphas(),
            participation: net.participation(),
            losses,
        })
    }
}

/// Test oracle: scores 1 for genomes gene-equal to `planted`, 0 otherwise.
pub struct PlantedScorer {
    pub planted: Genes,
}

impl Scorer for PlantedScorer {
    fn score(&mut self, sampled: &[Vec<Member>], steps: usize, _generation: usize) -> Result<GenerationScores> {
        Ok(GenerationScores {
            alphas: sampled
                .iter()
                .map(|l| {
                    l.iter()
                        .map(|m| (m.id(), if m.genome.genes == self.planted { 1.0 } else { 0.0 }))
                        .collect()
                })
                .collect(),
            participation: sampled
                .iter()
                .map(|l| l.iter().map(|m| (m.id(), m.participation + steps as u64)).collect())
                .collect(),
            losses: vec![0.0; steps],
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerStats {
    pub generation: usize,
    pub layer: usize,
    pub mean_fitness: f64,
    pub max_fitness: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvolutionTrace {
    /// `(iteration, loss)`, iterations counted from 1.
    pub losses: Vec<(u64, f64)>,
    pub fitness: Vec<LayerStats>,
    /// Seconds spent per generation.
    pub wall_clock: Vec<f64>,
}

impl EvolutionTrace {
    /// Two CSV tables (losses, then fitness statistics) separated by a blank
    /// line, after a `#` provenance line. Wall-clock time is left out so the
    /// file is reproducible.
    pub fn to_csv(&self, provenance: &str) -> String {
        let mut out = format!("# {provenance}\niteration,loss\n");
        for (it, loss) in &self.losses {
            let _ = writeln!(out, "{it},{}", round_sig9(*loss));
        }
        out.push_str("\ngeneration,layer,mean_fitness,max_fitness\n");
        for s in &self.fitness {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                s.generation,
                s.layer,
                round_sig9(s.mean_fitness),
                round_sig9(s.max_fitness)
            );
        }
        out
    }
}

/// Runs the loop against any scorer. The trace survives a failed run.
pub struct Evolution<'c> {
    pub cfg: &'c EvolutionConfig,
    pub schedule: Schedule,
    pub populations: Vec<LayerPopulation>,
    pub trace: EvolutionTrace,
    shapes: Vec<LayerShape>,
    rng: ChaCha8Rng,
    ids: IdSource,
}

impl<'c> Evolution<'c> {
    /// Seeds the populations (reference first, all rejection-sampled under the budget).
    pub fn new(cfg: &'c EvolutionConfig, schedule: Schedule) -> Result<Self> {
        let shapes = schedule.plan.layer_shapes()?;
        let budget = cfg.budget()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut ids = IdSource::new();
        let reference = cfg.reference_genes();
        let populations = init_populations(
            shapes.len(),
            cfg.population,
            cfg.k.max(2),
            reference.as_ref(),
            &mut rng,
            &mut ids,
            |l, g| g.is_live() && budget.admits(madds(g, &shapes[l])),
        )?;
        Ok(Evolution {
            cfg,
            schedule,
            populations,
            trace: EvolutionTrace::default(),
            shapes,
            rng,
            ids,
        })
    }

    pub fn run<S: Scorer>(&mut self, scorer: &mut S) -> Result<()> {
        let f = self.schedule.f;
        let generations = self.schedule.generations();
        let budget = self.cfg.budget()?;
        let reference = self.cfg.reference_genes().map(|g| CellGenome::new(g, GenomeId(0)));
        for g in 0..generations {
            let started = Instant::now();
            let iteration = g * f;
            let winners = self
                .populations
                .iter()
                .map(|p| p.tournament_select(self.cfg.tournament, self.cfg.k, &mut self.rng))
                .collect::<Result<Vec<_>>>()?;
            let scores = scorer.score(&winners, f, g)?;
            self.trace
                .losses
                .extend(scores.losses.iter().enumerate().map(|(i, &l)| ((iteration + i + 1) as u64, l)));
            for (pop, (alphas, parts)) in self.populations.iter_mut().zip(scores.alphas.iter().zip(&scores.participation)) {
                for &(id, a) in alphas {
                    pop.writeback_fitness(id, a, self.cfg.epsilon)?;
                }
                for &(id, n) in parts {
                    pop.get_mut(id).ok_or(Error::UnknownGenome(id.0))?.participation = n;
                }
            }
            for pop in &self.populations {
                let n = pop.members.len() as f64;
                self.trace.fitness.push(LayerStats {
                    generation: g,
                    layer: pop.layer,
                    mean_fitness: pop.members.iter().map(|m| m.fitness).sum::<f64>() / n,
                    max_fitness: pop.members.iter().map(|m| m.fitness).fold(f64::NEG_INFINITY, f64::max),
                });
            }
            // the final top-K is taken before any unevaluated offspring appear
            if g + 1 < generations {
                let active = self.cfg.reference_schedule && reference_schedule(self.schedule.total, iteration);
                for (l, (pop, won)) in self.populations.iter_mut().zip(&winners).enumerate() {
                    let constraints = MutationConstraints {
                        reference: reference.as_ref().filter(|_| active),
                        tau: self.cfg.tau,
                        budget,
                        shape: self.shapes[l],
                        n_mut: self.cfg.n_mut,
                        max_retries: MutationConstraints::DEFAULT_RETRIES,
                    };
                    pop.spawn_offspring(
                        won,
                        &constraints,
                        self.schedule.n_offspring,
                        (iteration + f) as u64,
                        &mut self.rng,
                        &mut self.ids,
                    )?;
                }
            }
            self.trace.wall_clock.push(started.elapsed().as_secs_f64());
        }
        Ok(())
    }

    pub fn search_space(&self, config_hash: &str) -> SearchSpace {
        SearchSpace::from_populations(
            &self.populations,
            self.cfg.k,
            self.cfg.seed,
            self.schedule.total as u64,
            config_hash,
        )
    }
}

/// Everything a supernet-scored evolution run produces.
pub struct EvolutionRun {
    pub space: SearchSpace,
    pub trace: EvolutionTrace,
    /// Shared weights, for inheritance by the second-stage search.
    pub store: WeightStore<f32>,
}

pub fn run_evolution(cfg: &EvolutionConfig, data: &Dataset, config_hash: &str) -> Result<EvolutionRun> {
    let schedule = cfg.resolve(data.len(), data.image_shape(), data.classes)?;
    let mut scorer = SupernetScorer::new(cfg, &schedule, data)?;
    let mut evo = Evolution::new(cfg, schedule)?;
    evo.run(&mut scorer)?;
    Ok(EvolutionRun {
        space: evo.search_space(config_hash),
        trace: evo.trace,
        store: scorer.store,
    })
}

/// Training-loss checkpoints, as percentages of the run.
pub const SPEEDUP_CHECKPOINTS: [usize; 4] = [25, 50, 75, 100];

#[derive(Clone, Debug, PartialEq)]
pub struct SpeedupRow {
    pub seed: u64,
    pub reference: bool,
    pub checkpoint: usize,
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeedupReport {
    pub rows: Vec<SpeedupRow>,
}

impl SpeedupReport {
    fn loss(&self, seed: u64, reference: bool, checkpoint: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.seed == seed && r.reference == reference && r.checkpoint == checkpoint)
            .map(|r| r.loss)
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        s.dedup();
        s
    }

    /// Seeds whose reference arm has the lower loss at `checkpoint`.
    pub fn reference_wins(&self, checkpoint: usize) -> usize {
        self.seeds()
            .into_iter()
            .filter(|&s| match (self.loss(s, true, checkpoint), self.loss(s, false, checkpoint)) {
                (Some(a), Some(b)) => a < b,
                _ => false,
            })
            .count()
    }

    pub fn mean_loss(&self, reference: bool, checkpoint: usize) -> f64 {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.reference == reference && r.checkpoint == checkpoint)
            .map(|r| r.loss)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// `seed,arm,checkpoint,iteration,loss` rows, then per-arm means with seed `mean`.
    pub fn to_csv(&self, provenance: &str) -> String {
        let arm = |r: bool| if r { "reference" } else { "baseline" };
        let mut out = format!("# {provenance}\nseed,arm,checkpoint,iteration,loss\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.seed, arm(r.reference), r.checkpoint, r.iteration, round_sig9(r.loss));
        }
        for reference in [true, false] {
            for c in SPEEDUP_CHECKPOINTS {
                let it = self.rows.iter().find(|r| r.checkpoint == c).map_or(0, |r| r.iteration);
                let _ = writeln!(out, "mean,{},{c},{it},{}", arm(reference), round_sig9(self.mean_loss(reference, c)));
            }
        }
        out
    }
}

/// Mean loss over the window of `total / 20` iterations (at least one)
/// ending at `iteration`.
fn windowed_loss(losses: &[(u64, f64)], iteration: usize, total: usize) -> f64 {
    let w = (total / 20).max(1);
    let lo = iteration.saturating_sub(w);
    let sel: Vec<f64> = losses
        .iter()
        .filter(|(i, _)| (*i as usize) > lo && (*i as usize) <= iteration)
        .map(|p| p.1)
        .collect();
    sel.iter().sum::<f64>() / sel.len().max(1) as f64
}

/// Paired comparison: per seed, one run with the reference schedule and one
/// without, from identical initial populations.
pub fn speedup_experiment(cfg: &EvolutionConfig, data: &Dataset, seeds: &[u64]) -> Result<SpeedupReport> {
    if seeds.len() < 3 {
        return Err(Error::Config(format!("speedup needs at least 3 seeds, got {}", seeds.len())));
    }
    if cfg.reference_genes().is_none() {
        return Err(Error::Config("speedup needs a reference genome".into()));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        for reference in [true, false] {
            let arm = EvolutionConfig {
                seed,
                reference_schedule: reference,
                ..cfg.clone()
            };
            let run = run_evolution(&arm, data, &arm.hash())?;
            let total = run.trace.losses.len();
            for c in SPEEDUP_CHECKPOINTS {
                let iteration = (total * c / 100).max(1);
                rows.push(SpeedupRow {
                    seed,
                    reference,
                    checkpoint: c,
                    iteration,
                    loss: windowed_loss(&run.trace.losses, iteration, total),
                });
            }
        }
    }
    Ok(SpeedupReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthSpec};

    fn tiny_plan() -> ChannelPlan {
        ChannelPlan {
            in_channels: 3,
            height: 8,
            width: 8,
            stem_channels: 4,
            layers: vec![
                crate::supernet::LayerPlan { channels: 4, stride: 1 },
                crate::supernet::LayerPlan { channels: 8, stride: 2 },
            ],
            classes: 3,
        }
    }

    fn tiny_cfg() -> EvolutionConfig {
        EvolutionConfig {
            k: 2,
            population: 8,
            tournament: 3,
            iterations_per_generation: Some(2),
            total_iterations: Some(6),
            batch_size: 8,
            plan: Some(tiny_plan()),
            ..EvolutionConfig::default()
        }
    }

    #[test]
    fn schedule_boundaries() {
        assert!(reference_schedule(10, 0));
        assert!(reference_schedule(10, 4));
        assert!(!reference_schedule(10, 5));
        assert!(!reference_schedule(10, 9));
    }

    #[test]
    fn resolve_validates() {
        let cfg = tiny_cfg();
        let s = cfg.resolve(48, (3, 8, 8), 3).unwrap();
        assert_eq!((s.f, s.total, s.n_offspring, s.generations()), (2, 6, 2, 3));
        let bad = EvolutionConfig {
            total_iterations: Some(7),
            ..tiny_cfg()
        };
        assert!(matches!(bad.resolve(48, (3, 8, 8), 3), Err(Error::Config(_))));
        let bad = EvolutionConfig { tau: 0.0, ..tiny_cfg() };
        assert!(bad.resolve(48, (3, 8, 8), 3).is_err());
        let bad = EvolutionConfig { epsilon: 1.5, ..tiny_cfg() };
        assert!(bad.resolve(48, (3, 8, 8), 3).is_err());
        assert!(tiny_cfg().resolve(48, (1, 8, 8), 3).is_err());
        let defaults = EvolutionConfig {
            plan: None,
            ..EvolutionConfig::default()
        };
        let s = defaults.resolve(640, (3, 16, 16), 10).unwrap();
        assert_eq!((s.f, s.total), (20, 800));
    }

    #[test]
    fn one_generation_writes_back_once() {
        let cfg = EvolutionConfig {
            total_iterations: Some(2),
            epsilon: 1.0,
            ..tiny_cfg()
        };
        let sched = cfg.resolve(48, (3, 8, 8), 3).unwrap();
        let planted = Genes::INVERTED_RESIDUAL;
        let mut evo = Evolution::new(&cfg, sched).unwrap();
        evo.run(&mut PlantedScorer { planted }).unwrap();
        assert_eq!(evo.trace.fitness.len(), 2);
        for pop in &evo.populations {
            assert_eq!(pop.members.iter().map(|m| m.participation).sum::<u64>(), 2 * 2);
            assert_eq!(pop.members.len(), 8);
        }
    }

    #[test]
    fn zero_momentum_keeps_initial_fitness() {
        let cfg = EvolutionConfig { epsilon: 0.0, ..tiny_cfg() };
        let sched = cfg.resolve(48, (3, 8, 8), 3).unwrap();
        let mut evo = Evolution::new(&cfg, sched).unwrap();
        evo.run(&mut PlantedScorer { planted: Genes::INVERTED_RESIDUAL }).unwrap();
        let space = evo.search_space("h");
        assert!(space.layers.iter().flatten().all(|c| c.fitness == 0.0));
    }

    #[test]
    fn supernet_run_is_deterministic() {
        let data = synth_dataset(&SynthSpec::new(3, 20, 8, 8, 1)).unwrap();
        let cfg = tiny_cfg();
        let a = run_evolution(&cfg, &data.train, &cfg.hash()).unwrap();
        let b = run_evolution(&cfg, &data.train, &cfg.hash()).unwrap();
        assert_eq!(a.space.to_json(), b.space.to_json());
        assert_eq!(a.trace.losses, b.trace.losses);
        assert_eq!(a.trace.losses.len(), 6);
        assert_eq!(a.store.to_checkpoint_bytes().unwrap(), b.store.to_checkpoint_bytes().unwrap());
        assert_eq!(a.space.layers.len(), 2);
        assert!(a.space.layers.iter().all(|l| l.len() == 2));
        let csv = a.trace.to_csv("x");
        assert!(csv.starts_with("# x\niteration,loss\n1,"));
        assert!(csv.contains("\ngeneration,layer,mean_fitness,max_fitness\n"));
    }

    #[test]
    fn budget_holds_for_every_member() {
        let shapes = tiny_plan().layer_shapes().unwrap();
        let cap = 20_000;
        let cfg = EvolutionConfig {
            madds_max: Some(cap),
            total_iterations: Some(10),
            ..tiny_cfg()
        };
        let sched = cfg.resolve(48, (3, 8, 8), 3).unwrap();
        let cfg_ref = EvolutionConfig {
            reference: ReferenceSpec::None,
            ..cfg.clone()
        };
        let mut evo = Evolution::new(&cfg_ref, sched).unwrap();
        evo.run(&mut PlantedScorer { planted: Genes::INVERTED_RESIDUAL }).unwrap();
        for (pop, shape) in evo.populations.iter().zip(&shapes) {
            assert!(pop.members.iter().all(|m| madds(&m.genome.genes, shape) < cap));
        }
    }
}
