//! Cell genomes: a fixed six-node DAG whose six edges each carry one of five
//! operators, plus a channel-expansion ratio and an aggregation function.
//!
//! ```text
//!        +--e0--> A1 --e1--> A2 --e2--+
//!   IN --|                            |--agg--> OUT
//!        +--e3--> B1 --e4--> B2 --e5--+
//! ```
//!
//! `IN` expands `C_in -> r*C_in` with a 1x1 convolution (after 2x2 average
//! pooling when the layer downsamples); `OUT` merges the two branch tails
//! with the aggregation and projects `r*C_in -> C_out` with a 1x1
//! convolution. Every evolvable edge maps `r*C_in -> r*C_in` at stride 1.

mod codec;
mod cost;

pub use codec::{decode, encode};
pub use cost::{madds, LayerShape, MaddsBudget};

use std::fmt;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NODE_COUNT: usize = 6;
pub const EDGE_COUNT: usize = 6;
/// Positions that mutation may touch: six edges, the ratio and the aggregation.
pub const GENE_COUNT: usize = EDGE_COUNT + 2;
pub const RATIO_GENE: usize = EDGE_COUNT;
pub const AGG_GENE: usize = EDGE_COUNT + 1;
/// `5^6 * 3 * 2`.
pub const GENOME_SPACE_SIZE: usize = 93_750;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum OperatorCode {
    Zero = 0,
    Identity = 1,
    Conv1x1 = 2,
    Conv3x3 = 3,
    DwConv3x3 = 4,
}

impl OperatorCode {
    pub const ALL: [OperatorCode; 5] = [
        OperatorCode::Zero,
        OperatorCode::Identity,
        OperatorCode::Conv1x1,
        OperatorCode::Conv3x3,
        OperatorCode::DwConv3x3,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    /// Kernel size for the convolutional operators.
    pub fn kernel(self) -> Option<usize> {
        match self {
            OperatorCode::Conv1x1 => Some(1),
            OperatorCode::Conv3x3 | OperatorCode::DwConv3x3 => Some(3),
            OperatorCode::Zero | OperatorCode::Identity => None,
        }
    }
}

impl TryFrom<u8> for OperatorCode {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        OperatorCode::ALL
            .get(v as usize)
            .copied()
            .ok_or_else(|| format!("unknown operator code {v}"))
    }
}

impl From<OperatorCode> for u8 {
    fn from(op: OperatorCode) -> u8 {
        op.code()
    }
}

/// Ratio between the cell's internal width and its input channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum ChannelRatio {
    R1,
    R3,
    R6,
}

impl ChannelRatio {
    pub const ALL: [ChannelRatio; 3] = [ChannelRatio::R1, ChannelRatio::R3, ChannelRatio::R6];

    pub fn value(self) -> usize {
        match self {
            ChannelRatio::R1 => 1,
            ChannelRatio::R3 => 3,
            ChannelRatio::R6 => 6,
        }
    }
}

impl TryFrom<u8> for ChannelRatio {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(ChannelRatio::R1),
            3 => Ok(ChannelRatio::R3),
            6 => Ok(ChannelRatio::R6),
            _ => Err(format!("ratio must be 1, 3 or 6, got {v}")),
        }
    }
}

impl From<ChannelRatio> for u8 {
    fn from(r: ChannelRatio) -> u8 {
        r.value() as u8
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Add,
    Hadamard,
}

impl Aggregation {
    pub const ALL: [Aggregation; 2] = [Aggregation::Add, Aggregation::Hadamard];
}

/// The heritable part of a genome, in canonical skeleton edge order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Genes {
    pub edges: [OperatorCode; EDGE_COUNT],
    pub ratio: ChannelRatio,
    pub agg: Aggregation,
}

impl Genes {
    /// The IRB-equivalent cell: branch A = 1x1 expand, 3x3 depthwise, 1x1;
    /// branch B empty; ratio 6; additive merge.
    pub const INVERTED_RESIDUAL: Genes = Genes {
        edges: [
            OperatorCode::Conv1x1,
            OperatorCode::DwConv3x3,
            OperatorCode::Conv1x1,
            OperatorCode::Zero,
            OperatorCode::Zero,
            OperatorCode::Zero,
        ],
        ratio: ChannelRatio::R6,
        agg: Aggregation::Add,
    };

    /// True when the cell output depends on its input: an additive merge
    /// needs one branch free of `Zero` edges, a product needs both.
    pub fn is_live(&self) -> bool {
        let open = |b: &[OperatorCode]| !b.contains(&OperatorCode::Zero);
        let (a, b) = (open(&self.edges[..3]), open(&self.edges[3..]));
        match self.agg {
            Aggregation::Add => a || b,
            Aggregation::Hadamard => a && b,
        }
    }

    /// Every genome of the space in a fixed lexicographic order.
    pub fn enumerate() -> impl Iterator<Item = Genes> {
        (0..GENOME_SPACE_SIZE).map(|mut i| {
            let agg = Aggregation::ALL[i % 2];
            i /= 2;
            let ratio = ChannelRatio::ALL[i % 3];
            i /= 3;
            let mut edges = [OperatorCode::Zero; EDGE_COUNT];
            for e in edges.iter_mut().rev() {
                *e = OperatorCode::ALL[i % 5];
                i /= 5;
            }
            Genes { edges, ratio, agg }
        })
    }

    fn gene(&self, pos: usize) -> u8 {
        match pos {
            p if p < EDGE_COUNT => self.edges[p].code(),
            RATIO_GENE => self.ratio.value() as u8,
            AGG_GENE => self.agg as u8,
            _ => unreachable!("gene position {pos}"),
        }
    }

    fn resample_gene<R: Rng + ?Sized>(&mut self, pos: usize, rng: &mut R) {
        // draw uniformly among the values different from the current one
        match pos {
            p if p < EDGE_COUNT => {
                let cur = self.edges[p] as usize;
                let k = (cur + 1 + rng.random_range(0..4)) % 5;
                self.edges[p] = OperatorCode::ALL[k];
            }
            RATIO_GENE => {
                let cur = ChannelRatio::ALL.iter().position(|&r| r == self.ratio).unwrap();
                self.ratio = ChannelRatio::ALL[(cur + 1 + rng.random_range(0..2)) % 3];
            }
            AGG_GENE => {
                self.agg = match self.agg {
                    Aggregation::Add => Aggregation::Hadamard,
                    Aggregation::Hadamard => Aggregation::Add,
                };
            }
            _ => unreachable!("gene position {pos}"),
        }
    }

    pub fn distance(&self, other: &Genes) -> Hamming {
        Hamming((0..GENE_COUNT).filter(|&p| self.gene(p) != other.gene(p)).count() as u8)
    }
}

/// Identifier of one genome instance; offspring always get a fresh one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GenomeId(pub u64);

impl fmt::Display for GenomeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Monotone id allocator owned by one run, so ids (and everything keyed on
/// them) are reproducible.
#[derive(Clone, Debug, Default)]
pub struct IdSource {
    next: u64,
}

impl IdSource {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn starting_at(next: u64) -> Self {
        IdSource { next }
    }

    pub fn fresh(&mut self) -> GenomeId {
        let id = GenomeId(self.next);
        self.next += 1;
        id
    }
}

/// A genome instance. Equality compares genes only.
#[derive(Clone, Copy, Debug)]
pub struct CellGenome {
    pub genes: Genes,
    pub id: GenomeId,
}

impl PartialEq for CellGenome {
    fn eq(&self, other: &Self) -> bool {
        self.genes == other.genes
    }
}

impl Eq for CellGenome {}

impl CellGenome {
    pub fn new(genes: Genes, id: GenomeId) -> Self {
        CellGenome { genes, id }
    }

    /// Uniform over the whole space.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, ids: &mut IdSource) -> Self {
        let mut edges = [OperatorCode::Zero; EDGE_COUNT];
        for e in &mut edges {
            *e = OperatorCode::ALL[rng.random_range(0..5)];
        }
        let ratio = ChannelRatio::ALL[rng.random_range(0..3)];
        let agg = Aggregation::ALL[rng.random_range(0..2)];
        CellGenome::new(Genes { edges, ratio, agg }, ids.fresh())
    }

    pub fn hamming(&self, other: &CellGenome) -> Hamming {
        self.genes.distance(&other.genes)
    }

    /// Resamples exactly `n_mut` distinct gene positions to new values.
    pub fn mutate<R: Rng + ?Sized>(&self, rng: &mut R, n_mut: usize, ids: &mut IdSource) -> Result<CellGenome> {
        if !(1..=GENE_COUNT).contains(&n_mut) {
            return Err(Error::invalid(format!("n_mut must be in 1..={GENE_COUNT}, got {n_mut}")));
        }
        let mut genes = self.genes;
        for pos in index::sample(rng, GENE_COUNT, n_mut) {
            genes.resample_gene(pos, rng);
        }
        Ok(CellGenome::new(genes, ids.fresh()))
    }

    /// Mutates until the child is live and satisfies every active constraint.
    pub fn constrained_mutate<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        c: &MutationConstraints<'_>,
        ids: &mut IdSource,
    ) -> Result<CellGenome> {
        let (mut far, mut costly, mut dead) = (0usize, 0usize, 0usize);
        for _ in 0..c.max_retries {
            let child = self.mutate(rng, c.n_mut, ids)?;
            if !child.genes.is_live() {
                dead += 1;
                continue;
            }
            let near = c
                .reference
                .is_none_or(|r| child.hamming(r).as_f64() < c.tau);
            let cheap = c.budget.admits(madds(&child.genes, &c.shape));
            if near && cheap {
                return Ok(child);
            }
            far += usize::from(!near);
            costly += usize::from(!cheap);
        }
        Err(Error::InfeasibleMutation {
            constraint: if dead > costly.max(far) {
                "liveness"
            } else if costly >= far {
                "MAdds budget"
            } else {
                "reference distance"
            },
            attempts: c.max_retries,
        })
    }
}

/// Constraints checked by [`CellGenome::constrained_mutate`].
#[derive(Clone, Copy, Debug)]
pub struct MutationConstraints<'a> {
    /// Active reference genome; `None` disables the distance check.
    pub reference: Option<&'a CellGenome>,
    /// Children must be strictly closer than this to the reference.
    pub tau: f64,
    pub budget: MaddsBudget,
    pub shape: LayerShape,
    pub n_mut: usize,
    pub max_retries: usize,
}

impl<'a> MutationConstraints<'a> {
    pub const DEFAULT_RETRIES: usize = 1000;

    pub fn new(shape: LayerShape) -> Self {
        MutationConstraints {
            reference: None,
            tau: 1.0,
            budget: MaddsBudget::UNLIMITED,
            shape,
            n_mut: 1,
            max_retries: Self::DEFAULT_RETRIES,
        }
    }
}

/// Hamming distance between genomes, `differing genes / V(V-1)` with `V = 6`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Hamming(u8);

impl Hamming {
    pub const DENOMINATOR: u32 = (NODE_COUNT * (NODE_COUNT - 1)) as u32;
    pub const MAX: Hamming = Hamming(GENE_COUNT as u8);

    pub fn numerator(self) -> u32 {
        self.0 as u32
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / Self::DENOMINATOR as f64
    }
}

impl fmt::Display for Hamming {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.0, Self::DENOMINATOR)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkeletonNode {
    In,
    A1,
    A2,
    B1,
    B2,
    Out,
}

/// The fixed cell topology.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Skeleton {
    pub nodes: [SkeletonNode; NODE_COUNT],
    /// Evolvable edges in canonical gene order.
    pub edges: [(SkeletonNode, SkeletonNode); EDGE_COUNT],
}

pub const SKELETON_VERSION: u32 = 1;

pub fn skeleton() -> Skeleton {
    use SkeletonNode::*;
    Skeleton {
        nodes: [In, A1, A2, B1, B2, Out],
        edges: [(In, A1), (A1, A2), (A2, Out), (In, B1), (B1, B2), (B2, Out)],
    }
}
