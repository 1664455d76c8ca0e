//! The weight-sharing supernet: K candidate cells per layer mixed by
//! softmax-normalized fitness scores, with shared weights held in a
//! [`WeightStore`] so regenerated supernets inherit what earlier ones learned.

mod cell;
mod store;

pub use cell::{avg_pool, Cell, ConvBn};
pub use store::{Init, WeightStore};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{eval_batches, Batches, Dataset};
use crate::error::{Error, Result};
use crate::genome::{madds, GenomeId, LayerShape};
use crate::population::Member;
use crate::tensor::{BnMode, Element, Gradients, Graph, Param, SgdState, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerPlan {
    pub channels: usize,
    pub stride: usize,
}

/// Channel and stride layout of the network around the mixed layers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelPlan {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_stem")]
    pub stem_channels: usize,
    pub layers: Vec<LayerPlan>,
    pub classes: usize,
}

fn default_stem() -> usize {
    16
}

impl ChannelPlan {
    /// Six layers of widths 16, 16, 32, 32, 64, 64 with strides 1, 2, 1, 2, 1, 1.
    pub fn desk_default(in_channels: usize, height: usize, width: usize, classes: usize) -> Self {
        let layers = [(16, 1), (16, 2), (32, 1), (32, 2), (64, 1), (64, 1)]
            .into_iter()
            .map(|(channels, stride)| LayerPlan { channels, stride })
            .collect();
        ChannelPlan {
            in_channels,
            height,
            width,
            stem_channels: default_stem(),
            layers,
            classes,
        }
    }

    /// Spatial size after the 3x3 stride-2 stem.
    pub fn stem_hw(&self) -> (usize, usize) {
        ((self.height + 1) / 2, (self.width + 1) / 2)
    }

    /// Input geometry of every layer; fails when a stride empties the map.
    pub fn layer_shapes(&self) -> Result<Vec<LayerShape>> {
        if self.in_channels == 0 || self.stem_channels == 0 || self.classes == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!("degenerate channel plan {self:?}")));
        }
        let (mut h, mut w) = self.stem_hw();
        let mut c = self.stem_channels;
        let mut out = Vec::with_capacity(self.layers.len());
        for (l, lp) in self.layers.iter().enumerate() {
            if lp.channels == 0 || lp.stride == 0 || h / lp.stride == 0 || w / lp.stride == 0 {
                return Err(Error::Config(format!("layer {l} ({lp:?}) does not fit a {h}x{w} input")));
            }
            out.push(LayerShape::new(c, lp.channels, h, w, lp.stride));
            c = lp.channels;
            h /= lp.stride;
            w /= lp.stride;
        }
        Ok(out)
    }

    pub fn last_channels(&self) -> usize {
        self.layers.last().map_or(self.stem_channels, |l| l.channels)
    }

    pub fn stem_madds(&self) -> u64 {
        let (h, w) = self.stem_hw();
        (9 * self.in_channels * self.stem_channels * h * w) as u64
    }

    pub fn head_madds(&self) -> u64 {
        (self.last_channels() * self.classes) as u64
    }
}

/// How a mixed layer combines its paths during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// `sum_k p_k d_k(x)` over all paths.
    FullSum,
    /// One path drawn with probability `p_k` per batch.
    BinaryGate,
    /// One path drawn uniformly per batch; scores are left untouched.
    UniformPath,
}

/// Numerically stable softmax.
pub fn softmax(alpha: &[f64]) -> Vec<f64> {
    let m = alpha.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = alpha.iter().map(|a| (a - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Softmax chain rule for scores: `sum_k gate_k p_k (delta_ik - p_i)`.
pub fn softmax_backward(p: &[f64], gate_grads: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(gate_grads).map(|(a, b)| a * b).sum();
    p.iter().zip(gate_grads).map(|(pi, gi)| pi * (gi - dot)).collect()
}

fn sample_index<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            return k;
        }
    }
    p.len() - 1
}

/// K parallel candidate cells sharing one input and output geometry.
pub struct MixedLayer<T> {
    pub cells: Vec<Cell<T>>,
    pub alpha: Vec<f64>,
    pub participation: Vec<u64>,
    pub gate_mode: GateMode,
}

impl<T: Element> MixedLayer<T> {
    pub fn k(&self) -> usize {
        self.cells.len()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&self.alpha)
    }

    pub fn ids(&self) -> Vec<GenomeId> {
        self.cells.iter().map(|c| c.genome.id).collect()
    }

    /// MAdds of each path.
    pub fn costs(&self) -> Vec<u64> {
        self.cells.iter().map(|c| madds(&c.genome.genes, &c.shape)).collect()
    }

    /// Score gradient with the participation correction `n / n'`.
    pub fn alpha_grad(&self, gate_grads: &[f64], supernet_iters: u64) -> Vec<f64> {
        scaled_alpha_grad(&self.probabilities(), gate_grads, &self.participation, supernet_iters)
    }
}

/// `softmax_backward` with component `i` multiplied by `n / n'_i`; a member
/// that has never participated (`n'_i = 0`) keeps scale 1.
pub fn scaled_alpha_grad(p: &[f64], gate_grads: &[f64], participation: &[u64], n: u64) -> Vec<f64> {
    softmax_backward(p, gate_grads)
        .into_iter()
        .zip(participation)
        .map(|(g, &n_prime)| if n_prime == 0 { g } else { g * n as f64 / n_prime as f64 })
        .collect()
}

/// How paths are chosen for one forward pass.
pub enum PathChoice<'a, R: ?Sized> {
    /// Each layer follows its [`GateMode`]; `rng` drives path sampling.
    Train(&'a mut R),
    /// Full softmax mixture regardless of gate mode.
    Mixture,
    /// One given path per layer, no gating.
    Fixed(&'a [usize]),
}

/// Handles produced by [`Supernet::forward`].
pub struct Forward {
    pub logits: Var,
    /// Gate scalar of each path per layer, where the path was gated.
    pub gates: Vec<Vec<Option<Var>>>,
    /// Paths that contributed, per layer.
    pub active: Vec<Vec<usize>>,
}

impl Forward {
    /// `dL/dg_k` per layer, zero for paths without a gate.
    pub fn gate_grads<T: Element>(&self, grads: &Gradients<T>) -> Vec<Vec<f64>> {
        self.gates
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|g| g.and_then(|v| grads.get(v)).map_or(0.0, |s| s[0].to_f64_lossy()))
                    .collect()
            })
            .collect()
    }
}

/// Per-call training settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSettings {
    pub steps: usize,
    pub lr: f64,
    pub alpha_lr: f64,
    /// Weight of the expected-MAdds penalty on the scores (0 disables it).
    pub lambda: f64,
}

pub struct Supernet<T> {
    pub plan: ChannelPlan,
    pub stem: ConvBn<T>,
    pub layers: Vec<MixedLayer<T>>,
    pub head_w: Param<T>,
    pub head_b: Param<T>,
    /// Training iterations accumulated since the search began.
    pub iterations: u64,
}

/// Builds a supernet over `sampled[l]` (K members per layer). Scores start
/// at the members' fitness and participation at their counters.
pub fn assemble<T: Element>(
    sampled: &[Vec<Member>],
    plan: &ChannelPlan,
    store: &mut WeightStore<T>,
    gate_mode: GateMode,
    iterations: u64,
) -> Result<Supernet<T>> {
    let shapes = plan.layer_shapes()?;
    if sampled.len() != shapes.len() {
        return Err(Error::Config(format!(
            "{} sampled layers for a {}-layer plan",
            sampled.len(),
            shapes.len()
        )));
    }
    let k = sampled.first().map_or(0, Vec::len);
    if k == 0 || sampled.iter().any(|s| s.len() != k) {
        return Err(Error::invalid("every layer needs the same non-zero number of sampled members"));
    }
    let stem = ConvBn::new(store, "stem", plan.in_channels, plan.stem_channels, 3, 2, 1, true)?;
    let mut layers = Vec::with_capacity(shapes.len());
    for (l, (members, shape)) in sampled.iter().zip(&shapes).enumerate() {
        let cells = members
            .iter()
            .map(|m| Cell::build(store, l, m.genome, *shape))
            .collect::<Result<Vec<_>>>()?;
        layers.push(MixedLayer {
            cells,
            alpha: members.iter().map(|m| m.fitness).collect(),
            participation: members.iter().map(|m| m.participation).collect(),
            gate_mode,
        });
    }
    let c_last = plan.last_channels();
    let head_w = store.get_or_init("head/fc.w", &[plan.classes, c_last], Init::Normal {
        std: (1.0 / c_last as f64).sqrt(),
    })?;
    let head_b = store.get_or_init("head/fc.b", &[plan.classes], Init::Zeros)?;
    Ok(Supernet {
        plan: plan.clone(),
        stem,
        layers,
        head_w,
        head_b,
        iterations,
    })
}

impl<T: Element> Supernet<T> {
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        bn: BnMode,
        mut choice: PathChoice<'_, R>,
    ) -> Result<Forward> {
        let xs = g.shape(x);
        let want = [self.plan.in_channels, self.plan.height, self.plan.width];
        if xs.len() != 4 || xs[1..] != want {
            return Err(Error::shape("supernet", format!("input {xs:?} does not match plan {want:?}")));
        }
        if let PathChoice::Fixed(paths) = &choice {
            if paths.len() != self.layers.len() || paths.iter().zip(&self.layers).any(|(&k, l)| k >= l.k()) {
                return Err(Error::invalid(format!("path selection {paths:?} does not fit the supernet")));
            }
        }
        let mut h = self.stem.forward(g, x, bn)?;
        let mut gates = Vec::with_capacity(self.layers.len());
        let mut active = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let k_all = layer.k();
            let (paths, gated): (Vec<usize>, Vec<Option<f64>>) = match &mut choice {
                PathChoice::Fixed(p) => (vec![p[l]], vec![None]),
                PathChoice::Mixture => ((0..k_all).collect(), layer.probabilities().into_iter().map(Some).collect()),
                PathChoice::Train(rng) => match layer.gate_mode {
                    GateMode::FullSum => ((0..k_all).collect(), layer.probabilities().into_iter().map(Some).collect()),
                    GateMode::BinaryGate => (vec![sample_index(&layer.probabilities(), &mut **rng)], vec![Some(1.0)]),
                    GateMode::UniformPath => (vec![rng.random_range(0..k_all)], vec![None]),
                },
            };
            let mut layer_gates = vec![None; k_all];
            let mut out: Option<Var> = None;
            for (&k, gate) in paths.iter().zip(&gated) {
                let d = layer.cells[k].forward(g, h, bn)?;
                let term = match gate {
                    Some(value) => {
                        let gv = g.input(Tensor::scalar(T::from_f64_lossy(*value)).with_requires_grad(true));
                        layer_gates[k] = Some(gv);
                        g.scale(d, gv)?
                    }
                    None => d,
                };
                out = Some(match out {
                    Some(acc) => g.add(acc, term)?,
                    None => term,
                });
            }
            h = out.expect("at least one path");
            gates.push(layer_gates);
            active.push(paths);
        }
        let pooled = g.global_avg_pool(h)?;
        let w = g.param(&self.head_w);
        let b = g.param(&self.head_b);
        let logits = g.linear(pooled, w, b)?;
        Ok(Forward { logits, gates, active })
    }

    /// Expected MAdds under the score softmax: `sum_l sum_k p_k madds_k`
    /// plus the fixed stem and head costs.
    pub fn expected_madds(&self) -> f64 {
        let fixed = (self.plan.stem_madds() + self.plan.head_madds()) as f64;
        fixed
            + self
                .layers
                .iter()
                .map(|l| {
                    l.probabilities()
                        .iter()
                        .zip(l.costs())
                        .map(|(p, c)| p * c as f64)
                        .sum::<f64>()
                })
                .sum::<f64>()
    }

    /// Gradient of `lambda * expected_madds()` with respect to each layer's scores.
    pub fn penalty_grad(&self, lambda: f64) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .map(|l| {
                let costs: Vec<f64> = l.costs().into_iter().map(|c| lambda * c as f64).collect();
                softmax_backward(&l.probabilities(), &costs)
            })
            .collect()
    }

    /// Trains for `s.steps` mini-batches and returns the loss of each.
    ///
    /// Weights follow `opt`; scores descend their (participation-scaled)
    /// gradient at rate `s.alpha_lr`, plus `s.lambda` times the gradient of
    /// the expected MAdds. Failures report the supernet iteration.
    pub fn train_steps<R: Rng + ?Sized>(
        &mut self,
        data: &Dataset,
        batches: &mut Batches,
        opt: &mut SgdState<T>,
        s: &StepSettings,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if s.steps == 0 {
            return Err(Error::invalid("train_steps needs at least one step"));
        }
        let mut losses = Vec::with_capacity(s.steps);
        for _ in 0..s.steps {
            self.iterations += 1;
            let it = self.iterations;
            let loss = self
                .step(data, batches, opt, s, rng)
                .map_err(|e| Error::DivergedAt {
                    iteration: it,
                    source: Box::new(e),
                })?;
            losses.push(loss);
        }
        Ok(losses)
    }

    fn step<R: Rng + ?Sized>(
        &mut self,
        data: &Dataset,
        batches: &mut Batches,
        opt: &mut SgdState<T>,
        s: &StepSettings,
        rng: &mut R,
    ) -> Result<f64> {
        let idx = batches.next().expect("endless batches");
        let (x, labels) = data.batch::<T>(&idx);
        let mut g = Graph::new();
        let xv = g.input(x);
        let fwd = self.forward(&mut g, xv, BnMode::Train, PathChoice::Train(rng))?;
        let ce = g.softmax_cross_entropy(fwd.logits, &labels)?;
        for (layer, paths) in self.layers.iter_mut().zip(&fwd.active) {
            for &k in paths {
                layer.participation[k] += 1;
            }
        }
        let grads = g.backward(ce)?;
        opt.step(&g.params(), s.lr)?;
        let penalty = s.lambda * self.expected_madds();
        let gate_grads = fwd.gate_grads(&grads);
        let penalty_grads = self.penalty_grad(s.lambda);
        let n = self.iterations;
        for ((layer, gg), pg) in self.layers.iter_mut().zip(&gate_grads).zip(penalty_grads) {
            if layer.gate_mode == GateMode::UniformPath {
                continue;
            }
            let mut grad = layer.alpha_grad(gg, n);
            grad.iter_mut().zip(pg).for_each(|(a, r)| *a += r);
            for (a, d) in layer.alpha.iter_mut().zip(grad) {
                *a -= s.alpha_lr * d;
            }
            if !layer.alpha.iter().all(|a| a.is_finite()) {
                return Err(Error::NumericDivergence { primitive: "alpha_update" });
            }
        }
        Ok(g.value(ce)[0].to_f64_lossy() + penalty)
    }

    /// Live scores per layer, paired with the member they belong to.
    pub fn extract_alphas(&self) -> Vec<Vec<(GenomeId, f64)>> {
        self.layers
            .iter()
            .map(|l| l.ids().into_iter().zip(l.alpha.iter().copied()).collect())
            .collect()
    }

    pub fn participation(&self) -> Vec<Vec<(GenomeId, u64)>> {
        self.layers
            .iter()
            .map(|l| l.ids().into_iter().zip(l.participation.iter().copied()).collect())
            .collect()
    }

    /// Top-1 accuracy over `data` along fixed paths (or the full mixture
    /// when `paths` is `None`).
    pub fn accuracy(&self, data: &Dataset, batch_size: usize, bn: BnMode, paths: Option<&[usize]>) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::invalid("accuracy over an empty dataset"));
        }
        let mut correct = 0usize;
        for idx in eval_batches(data.len(), batch_size) {
            let (x, labels) = data.batch::<T>(&idx);
            let mut g = Graph::new();
            let xv = g.input(x);
            let choice: PathChoice<'_, rand_chacha::ChaCha8Rng> = match paths {
                Some(p) => PathChoice::Fixed(p),
                None => PathChoice::Mixture,
            };
            let fwd = self.forward(&mut g, xv, bn, choice)?;
            correct += count_correct(g.value(fwd.logits), &labels);
        }
        Ok(correct as f64 / data.len() as f64)
    }

    /// Replaces every running BN statistic with the statistics of one
    /// forward pass over the first `max_samples` rows of `data`. The EMA
    /// buffers lag behind weights that moved in the last few steps.
    pub fn recalibrate(&self, data: &Dataset, max_samples: usize, paths: Option<&[usize]>) -> Result<()> {
        let n = data.len().min(max_samples);
        if n < 2 {
            return Err(Error::invalid("recalibration needs at least 2 samples"));
        }
        let idx: Vec<usize> = (0..n).collect();
        let (x, _) = data.batch::<T>(&idx);
        let mut g = Graph::new();
        let xv = g.input(x);
        let choice: PathChoice<'_, rand_chacha::ChaCha8Rng> = match paths {
            Some(p) => PathChoice::Fixed(p),
            None => PathChoice::Mixture,
        };
        self.forward(&mut g, xv, BnMode::Calibrate, choice)?;
        Ok(())
    }
}

/// Number of rows of `logits` whose argmax equals the label.
pub fn count_correct<T: Element>(logits: &[T], labels: &[usize]) -> usize {
    if labels.is_empty() {
        return 0;
    }
    let classes = logits.len() / labels.len();
    logits
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            best == y
        })
        .count()
}

#[cfg(test)]
mod tests;
