use crate::error::Result;
use crate::genome::{Aggregation, CellGenome, LayerShape, OperatorCode};
use crate::tensor::{BnMode, Conv2dAttrs, Element, Graph, Param, Tensor, Var};

use super::store::{Init, WeightStore};

/// Convolution followed by batch normalization and an optional ReLU.
pub struct ConvBn<T> {
    pub w: Param<T>,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub attrs: Conv2dAttrs,
    pub relu: bool,
}

impl<T: Element> ConvBn<T> {
    /// Registers (or rebinds) `{prefix}.conv.w` and `{prefix}.bn.*`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut WeightStore<T>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        relu: bool,
    ) -> Result<Self> {
        let fan_in = c_in / groups * kernel * kernel;
        let w = store.get_or_init(
            &format!("{prefix}.conv.w"),
            &[c_out, c_in / groups, kernel, kernel],
            Init::HeNormal { fan_in },
        )?;
        Ok(ConvBn {
            w,
            gamma: store.get_or_init(&format!("{prefix}.bn.gamma"), &[c_out], Init::Ones)?,
            beta: store.get_or_init(&format!("{prefix}.bn.beta"), &[c_out], Init::Zeros)?,
            running_mean: store.get_or_init(&format!("{prefix}.bn.running_mean"), &[c_out], Init::Zeros)?,
            running_var: store.get_or_init(&format!("{prefix}.bn.running_var"), &[c_out], Init::Ones)?,
            attrs: Conv2dAttrs::new(stride, kernel / 2, groups),
            relu,
        })
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: BnMode) -> Result<Var> {
        let w = g.param(&self.w);
        let y = g.conv2d(x, w, self.attrs)?;
        let gamma = g.param(&self.gamma);
        let beta = g.param(&self.beta);
        let y = g.batchnorm2d(y, gamma, beta, Some((&self.running_mean, &self.running_var)), mode)?;
        if self.relu {
            g.relu(y)
        } else {
            Ok(y)
        }
    }
}

enum Edge<T> {
    Zero,
    Identity,
    Conv(ConvBn<T>),
}

/// A genome realized as trainable operators at a fixed layer geometry.
///
/// IN pools (2x2 average, when strided) and expands to `ratio * c_in`
/// channels; branches A and B chain three edges each; their outputs are
/// combined by the aggregation and OUT projects to `c_out` (no ReLU).
pub struct Cell<T> {
    pub genome: CellGenome,
    pub shape: LayerShape,
    expand: ConvBn<T>,
    edges: Vec<Edge<T>>,
    project: ConvBn<T>,
}

impl<T: Element> Cell<T> {
    /// Parameters are keyed `L{layer}/G{id}/...`, so a genome id seen before
    /// in the same layer gets its trained weights back.
    pub fn build(store: &mut WeightStore<T>, layer: usize, genome: CellGenome, shape: LayerShape) -> Result<Self> {
        let base = format!("L{layer}/G{}", genome.id.0);
        let inner = genome.genes.ratio.value() * shape.c_in;
        let expand = ConvBn::new(store, &format!("{base}/in"), shape.c_in, inner, 1, 1, 1, true)?;
        let mut edges = Vec::with_capacity(genome.genes.edges.len());
        for (e, op) in genome.genes.edges.iter().enumerate() {
            let prefix = format!("{base}/e{e}");
            edges.push(match op {
                OperatorCode::Zero => Edge::Zero,
                OperatorCode::Identity => Edge::Identity,
                OperatorCode::Conv1x1 => Edge::Conv(ConvBn::new(store, &prefix, inner, inner, 1, 1, 1, true)?),
                OperatorCode::Conv3x3 => Edge::Conv(ConvBn::new(store, &prefix, inner, inner, 3, 1, 1, true)?),
                OperatorCode::DwConv3x3 => Edge::Conv(ConvBn::new(store, &prefix, inner, inner, 3, 1, inner, true)?),
            });
        }
        let project = ConvBn::new(store, &format!("{base}/out"), inner, shape.c_out, 1, 1, 1, false)?;
        Ok(Cell {
            genome,
            shape,
            expand,
            edges,
            project,
        })
    }

    /// Handle of the IN expansion weight.
    pub fn expand_weight(&self) -> Param<T> {
        std::rc::Rc::clone(&self.expand.w)
    }

    fn edge(&self, g: &mut Graph<T>, e: usize, x: Var, mode: BnMode) -> Result<Var> {
        match &self.edges[e] {
            Edge::Zero => g.zero_like(x),
            Edge::Identity => Ok(x),
            Edge::Conv(op) => op.forward(g, x, mode),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: BnMode) -> Result<Var> {
        let x = if self.shape.stride > 1 { avg_pool(g, x, self.shape.stride)? } else { x };
        let inner = self.expand.forward(g, x, mode)?;
        let mut a = inner;
        for e in 0..3 {
            a = self.edge(g, e, a, mode)?;
        }
        let mut b = inner;
        for e in 3..6 {
            b = self.edge(g, e, b, mode)?;
        }
        let merged = match self.genome.genes.agg {
            Aggregation::Add => g.add(a, b)?,
            Aggregation::Hadamard => g.mul(a, b)?,
        };
        self.project.forward(g, merged, mode)
    }
}

/// `s x s` average pooling with stride `s`, as a constant depthwise conv.
pub fn avg_pool<T: Element>(g: &mut Graph<T>, x: Var, s: usize) -> Result<Var> {
    let c = g.shape(x)[1];
    let weight = T::from_f64_lossy(1.0 / (s * s) as f64);
    let w = g.constant(Tensor::full(vec![c, 1, s, s], weight));
    g.conv2d(x, w, Conv2dAttrs::new(s, 0, c))
}
