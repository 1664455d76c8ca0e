//! Per-layer populations of cell genomes with fitness scores, tournament
//! selection, steady-state offspring replacement, momentum fitness
//! write-back, and extraction of the top-K search space.
//!
//! Members are ranked by descending fitness; ties go to the lower genome id.

use std::cmp::Ordering;
use std::collections::HashSet;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::artifacts::{from_json_bytes, to_canonical_json, TOOL_VERSION};
use crate::error::{Error, Result};
use crate::genome::{CellGenome, GenomeId, Genes, Hamming, IdSource, MutationConstraints};

#[derive(Clone, Debug, PartialEq)]
pub struct Member {
    pub genome: CellGenome,
    pub fitness: f64,
    /// Supernet training iterations this genome has been instantiated in.
    pub participation: u64,
    pub born_at: u64,
}

impl Member {
    pub fn new(genome: CellGenome, fitness: f64, born_at: u64) -> Self {
        Member {
            genome,
            fitness,
            participation: 0,
            born_at,
        }
    }

    pub fn id(&self) -> GenomeId {
        self.genome.id
    }
}

fn reachable(parent: &CellGenome, reference: &CellGenome, c: &MutationConstraints<'_>) -> bool {
    let closest = parent.hamming(reference).numerator().saturating_sub(c.n_mut as u32);
    f64::from(closest) / f64::from(Hamming::DENOMINATOR) < c.tau
}

/// `Less` means `a` ranks ahead of `b`.
pub fn rank_order(a: &Member, b: &Member) -> Ordering {
    b.fitness
        .total_cmp(&a.fitness)
        .then_with(|| a.genome.id.cmp(&b.genome.id))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerPopulation {
    pub layer: usize,
    pub members: Vec<Member>,
}

const INIT_RETRIES: usize = 100_000;

/// Builds `layers` populations of `size` random genomes each. A provided
/// reference genome occupies the first slot of every population. `admit`
/// rejection-samples genomes per layer (e.g. a MAdds budget).
pub fn init_populations<R: Rng + ?Sized>(
    layers: usize,
    size: usize,
    k: usize,
    reference: Option<&Genes>,
    rng: &mut R,
    ids: &mut IdSource,
    mut admit: impl FnMut(usize, &Genes) -> bool,
) -> Result<Vec<LayerPopulation>> {
    if k < 2 || size < k {
        return Err(Error::invalid(format!(
            "population size {size} and K {k} must satisfy P >= K >= 2"
        )));
    }
    let mut pops = Vec::with_capacity(layers);
    for layer in 0..layers {
        let mut members = Vec::with_capacity(size);
        if let Some(r) = reference {
            if !admit(layer, r) {
                return Err(Error::Config(format!(
                    "reference genome violates the MAdds budget at layer {layer}"
                )));
            }
            members.push(Member::new(CellGenome::new(*r, ids.fresh()), 0.0, 0));
        }
        let mut tries = 0;
        while members.len() < size {
            let g = CellGenome::random(rng, ids);
            tries += 1;
            if admit(layer, &g.genes) {
                members.push(Member::new(g, 0.0, 0));
            } else if tries > INIT_RETRIES {
                return Err(Error::InfeasibleMutation {
                    constraint: "MAdds budget",
                    attempts: tries,
                });
            }
        }
        pops.push(LayerPopulation { layer, members });
    }
    Ok(pops)
}

impl LayerPopulation {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn get(&self, id: GenomeId) -> Option<&Member> {
        self.members.iter().find(|m| m.id() == id)
    }

    pub fn get_mut(&mut self, id: GenomeId) -> Option<&mut Member> {
        self.members.iter_mut().find(|m| m.id() == id)
    }

    /// Runs `k` tournaments of size `t`. Winners leave the pool, so the
    /// result holds `k` distinct members; a tournament on a pool smaller
    /// than `t` uses the whole pool. Fitness ties go to the member drawn
    /// first, so equal fitness means uniform selection.
    pub fn tournament_select<R: Rng + ?Sized>(&self, t: usize, k: usize, rng: &mut R) -> Result<Vec<Member>> {
        let p = self.members.len();
        if t < 2 || t > p || k == 0 || k > p {
            return Err(Error::invalid(format!(
                "tournament size {t} / count {k} out of range for population {p}"
            )));
        }
        let mut pool: Vec<usize> = (0..p).collect();
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            let draw = index::sample(rng, pool.len(), t.min(pool.len()));
            let best = draw
                .iter()
                .min_by(|&a, &b| self.members[pool[b]].fitness.total_cmp(&self.members[pool[a]].fitness))
                .expect("non-empty draw");
            out.push(self.members[pool.remove(best)].clone());
        }
        Ok(out)
    }

    /// Adds `n_offspring` constrained mutants of uniformly chosen winners.
    /// Each replaces the currently worst member that is neither a winner nor
    /// born in this call, and starts with its parent's fitness.
    #[allow(clippy::too_many_arguments)]
    pub fn spawn_offspring<R: Rng + ?Sized>(
        &mut self,
        winners: &[Member],
        constraints: &MutationConstraints<'_>,
        n_offspring: usize,
        iteration: u64,
        rng: &mut R,
        ids: &mut IdSource,
    ) -> Result<()> {
        if winners.is_empty() {
            return Err(Error::invalid("spawn_offspring needs at least one winner"));
        }
        if n_offspring + winners.len() > self.members.len() {
            return Err(Error::invalid(format!(
                "{n_offspring} offspring exceed P - K = {}",
                self.members.len().saturating_sub(winners.len())
            )));
        }
        let protected: HashSet<GenomeId> = winners.iter().map(Member::id).collect();
        let mut newborn: HashSet<GenomeId> = HashSet::new();
        for _ in 0..n_offspring {
            let parent = &winners[rng.random_range(0..winners.len())];
            let parent_fitness = self.get(parent.id()).map_or(parent.fitness, |m| m.fitness);
            // A parent too far from the active reference for any mutation to
            // land inside the threshold hands its slot to the reference.
            let source = match constraints.reference {
                Some(r) if !reachable(&parent.genome, r, constraints) => r,
                _ => &parent.genome,
            };
            let child = source.constrained_mutate(rng, constraints, ids)?;
            let slot = self
                .members
                .iter()
                .enumerate()
                .filter(|(_, m)| !protected.contains(&m.id()) && !newborn.contains(&m.id()))
                .max_by(|(_, a), (_, b)| rank_order(a, b))
                .map(|(i, _)| i)
                .expect("n_offspring <= P - K leaves a replaceable member");
            newborn.insert(child.id);
            self.members[slot] = Member::new(child, parent_fitness, iteration);
        }
        Ok(())
    }

    /// `fitness <- epsilon * alpha_star + (1 - epsilon) * fitness`.
    pub fn writeback_fitness(&mut self, id: GenomeId, alpha_star: f64, epsilon: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::invalid(format!("epsilon {epsilon} outside [0, 1]")));
        }
        let m = self.get_mut(id).ok_or(Error::UnknownGenome(id.0))?;
        m.fitness = epsilon * alpha_star + (1.0 - epsilon) * m.fitness;
        Ok(())
    }

    pub fn top_k(&self, k: usize) -> Vec<(CellGenome, f64)> {
        let mut ranked: Vec<&Member> = self.members.iter().collect();
        ranked.sort_by(|a, b| rank_order(a, b));
        ranked
            .into_iter()
            .take(k)
            .map(|m| (m.genome, m.fitness))
            .collect()
    }
}

/// One candidate cell of an emitted search space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpaceCell {
    pub genome: CellGenome,
    pub fitness: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceMeta {
    pub seed: u64,
    pub iterations: u64,
    pub config_hash: String,
    pub tool_version: String,
}

/// The per-layer top-K subspace produced by evolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchSpace {
    pub layers: Vec<Vec<SpaceCell>>,
    pub meta: SpaceMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CellJson {
    genome: Genes,
    fitness: f64,
    id: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerJson {
    layer: usize,
    cells: Vec<CellJson>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpaceJson {
    version: u32,
    layers: Vec<LayerJson>,
    meta: SpaceMeta,
}

pub const SEARCH_SPACE_VERSION: u32 = 1;

impl SearchSpace {
    pub fn from_populations(pops: &[LayerPopulation], k: usize, seed: u64, iterations: u64, config_hash: &str) -> Self {
        SearchSpace {
            layers: pops
                .iter()
                .map(|p| {
                    p.top_k(k)
                        .into_iter()
                        .map(|(genome, fitness)| SpaceCell { genome, fitness })
                        .collect()
                })
                .collect(),
            meta: SpaceMeta {
                seed,
                iterations,
                config_hash: config_hash.to_string(),
                tool_version: TOOL_VERSION.to_string(),
            },
        }
    }

    pub fn k(&self) -> usize {
        self.layers.first().map_or(0, Vec::len)
    }

    pub fn to_json(&self) -> String {
        let doc = SpaceJson {
            version: SEARCH_SPACE_VERSION,
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(layer, cells)| LayerJson {
                    layer,
                    cells: cells
                        .iter()
                        .map(|c| CellJson {
                            genome: c.genome.genes,
                            fitness: c.fitness,
                            id: c.genome.id.0,
                        })
                        .collect(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        to_canonical_json(&doc).expect("search space serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let doc: SpaceJson = from_json_bytes(bytes)?;
        if doc.version != SEARCH_SPACE_VERSION {
            return Err(Error::Config(format!("unsupported search space version {}", doc.version)));
        }
        let k = doc.layers.first().map_or(0, |l| l.cells.len());
        let mut layers = Vec::with_capacity(doc.layers.len());
        for (i, l) in doc.layers.into_iter().enumerate() {
            if l.layer != i {
                return Err(Error::Config(format!("layer {} listed at position {i}", l.layer)));
            }
            if l.cells.len() != k || k == 0 {
                return Err(Error::Config(format!("layer {i} has {} cells, expected {k}", l.cells.len())));
            }
            if l.cells.windows(2).any(|w| w[0].fitness < w[1].fitness) {
                return Err(Error::Config(format!("layer {i} cells are not sorted by fitness")));
            }
            layers.push(
                l.cells
                    .into_iter()
                    .map(|c| SpaceCell {
                        genome: CellGenome::new(c.genome, GenomeId(c.id)),
                        fitness: c.fitness,
                    })
                    .collect(),
            );
        }
        Ok(SearchSpace { layers, meta: doc.meta })
    }
}
