use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::kernels::{self, ConvGeom, BN_EPS};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// A shared, persistent parameter. Graphs read the value when the parameter
/// is bound and write gradients back into it during [`Graph::backward`].
pub type Param<T> = Rc<RefCell<Tensor<T>>>;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PrimitiveKind {
    Conv2d,
    BatchNorm2d,
    Relu,
    Add,
    Mul,
    GlobalAvgPool,
    Linear,
    SoftmaxCrossEntropy,
    Scale,
    ZeroLike,
    Sum,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 11] = [
        PrimitiveKind::Conv2d,
        PrimitiveKind::BatchNorm2d,
        PrimitiveKind::Relu,
        PrimitiveKind::Add,
        PrimitiveKind::Mul,
        PrimitiveKind::GlobalAvgPool,
        PrimitiveKind::Linear,
        PrimitiveKind::SoftmaxCrossEntropy,
        PrimitiveKind::Scale,
        PrimitiveKind::ZeroLike,
        PrimitiveKind::Sum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PrimitiveKind::Conv2d => "conv2d",
            PrimitiveKind::BatchNorm2d => "batchnorm2d",
            PrimitiveKind::Relu => "relu",
            PrimitiveKind::Add => "add",
            PrimitiveKind::Mul => "mul",
            PrimitiveKind::GlobalAvgPool => "global_avg_pool",
            PrimitiveKind::Linear => "linear",
            PrimitiveKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            PrimitiveKind::Scale => "scale",
            PrimitiveKind::ZeroLike => "zero_like",
            PrimitiveKind::Sum => "sum",
        }
    }
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dAttrs {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dAttrs {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Conv2dAttrs {
            stride,
            padding,
            groups,
        }
    }
}

impl Default for Conv2dAttrs {
    fn default() -> Self {
        Conv2dAttrs::new(1, 0, 1)
    }
}

/// Batch normalization statistics source.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics.
    Eval,
    /// Batch statistics without touching the running statistics (one-shot evaluation).
    Batch,
    /// Batch statistics that overwrite the running statistics (recalibration).
    Calibrate,
}

const BN_MOMENTUM: f64 = 0.1;

enum Op<T> {
    Leaf { param: Option<Param<T>> },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    GlobalAvgPool { x: Var },
    Linear { x: Var, w: Var, b: Var },
    CrossEntropy { logits: Var, probs: Vec<T>, labels: Vec<usize> },
    Scale { x: Var, s: Var },
    ZeroLike { x: Var },
    Sum { x: Var },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf { .. } => vec![],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Relu { x } | Op::GlobalAvgPool { x } | Op::ZeroLike { x } | Op::Sum { x } => {
                vec![*x]
            }
            Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Scale { x, s } => vec![*x, *s],
        }
    }
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// The gradient tape. Nodes are appended in execution order, which is a
/// topological order of the computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor<T>> {
        self.get(v)
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.to_vec()).expect("gradient shape"))
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, kind: PrimitiveKind) -> Result<Var> {
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericDivergence {
                primitive: kind.name(),
            });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, t: Tensor<T>, param: Option<Param<T>>) -> Var {
        let requires_grad = t.requires_grad();
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: t.into_data(),
            requires_grad,
            op: Op::Leaf { param },
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input tensor. It takes part in differentiation iff its
    /// `requires_grad` flag is set.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, None)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t.with_requires_grad(false), None)
    }

    /// Binds a persistent parameter; backward accumulates into its gradient buffer.
    pub fn param(&mut self, p: &Param<T>) -> Var {
        let t = p.borrow();
        let copy = Tensor::new(t.shape().to_vec(), t.data().to_vec())
            .expect("parameter shape")
            .with_requires_grad(t.requires_grad());
        drop(t);
        self.leaf(copy, Some(Rc::clone(p)))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Distinct parameter handles bound on this graph, in first-bind order.
    pub fn params(&self) -> Vec<Param<T>> {
        let mut out: Vec<Param<T>> = Vec::new();
        for n in &self.nodes {
            if let Op::Leaf { param: Some(p) } = &n.op {
                if !out.iter().any(|q| Rc::ptr_eq(q, p)) {
                    out.push(Rc::clone(p));
                }
            }
        }
        out
    }

    pub fn conv2d(&mut self, x: Var, w: Var, attrs: Conv2dAttrs) -> Result<Var> {
        let kind = PrimitiveKind::Conv2d;
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let bad = |d: &str| Error::shape(kind.name(), format!("input {xs:?}, weight {ws:?}: {d}"));
        if xs.len() != 4 || ws.len() != 4 {
            return Err(bad("expected rank-4 input and weight"));
        }
        let g = attrs.groups;
        if g == 0 || attrs.stride == 0 || xs[1] % g != 0 || ws[0] % g != 0 {
            return Err(bad("channels not divisible by groups"));
        }
        if ws[1] != xs[1] / g || ws[2] != ws[3] {
            return Err(bad("weight channels do not match input"));
        }
        if xs[2] + 2 * attrs.padding < ws[2] || xs[3] + 2 * attrs.padding < ws[3] {
            return Err(bad("kernel larger than padded input"));
        }
        let geom = ConvGeom {
            n: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            k: ws[2],
            stride: attrs.stride,
            pad: attrs.padding,
            groups: g,
        };
        let out = kernels::conv2d_forward(&geom, self.value(x), self.value(w));
        let shape = vec![geom.n, geom.c_out, geom.h_out(), geom.w_out()];
        self.push(shape, out, Op::Conv2d { x, w, geom }, kind)
    }

    /// Batch normalization over N, H, W. `running` holds the (mean, var)
    /// buffers used by [`BnMode::Eval`] and updated by [`BnMode::Train`].
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&Param<T>, &Param<T>)>,
        mode: BnMode,
    ) -> Result<Var> {
        let kind = PrimitiveKind::BatchNorm2d;
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape(kind.name(), format!("expected rank-4 input, got {xs:?}")));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                kind.name(),
                format!(
                    "input {xs:?}, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let eps = T::from_f64_lossy(BN_EPS);
        let (mean, var, batch_stats) = match mode {
            BnMode::Train | BnMode::Batch | BnMode::Calibrate => {
                if n * hw < 2 {
                    return Err(Error::shape(kind.name(), "batch statistics need at least 2 values per channel"));
                }
                let (m, v) = kernels::channel_stats(self.value(x), n, c, hw);
                (m, v, true)
            }
            BnMode::Eval => {
                let (rm, rv) = running.ok_or_else(|| Error::invalid("eval-mode batchnorm needs running statistics"))?;
                (rm.borrow().data().to_vec(), rv.borrow().data().to_vec(), false)
            }
        };
        if matches!(mode, BnMode::Train | BnMode::Calibrate) {
            if let Some((rm, rv)) = running {
                let mom = T::from_f64_lossy(if mode == BnMode::Train { BN_MOMENTUM } else { 1.0 });
                let count = T::from_usize(n * hw).unwrap();
                let unbias = count / (count - T::one());
                let mut rm = rm.borrow_mut();
                for (r, &m) in rm.data_mut().iter_mut().zip(&mean) {
                    *r = (T::one() - mom) * *r + mom * m;
                }
                let mut rv = rv.borrow_mut();
                for (r, &v) in rv.data_mut().iter_mut().zip(&var) {
                    *r = (T::one() - mom) * *r + mom * v * unbias;
                }
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (y, xhat) = kernels::batchnorm_apply(
            self.value(x),
            n,
            c,
            hw,
            &mean,
            &inv_std,
            self.value(gamma),
            self.value(beta),
        );
        self.push(
            xs,
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            kind,
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Relu { x }, PrimitiveKind::Relu)
    }

    fn same_shape(&self, kind: PrimitiveKind, a: Var, b: Var) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                kind.name(),
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(PrimitiveKind::Add, a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&p, &q)| p + q).collect();
        self.push(shape, out, Op::Add { a, b }, PrimitiveKind::Add)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(PrimitiveKind::Mul, a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&p, &q)| p * q).collect();
        self.push(shape, out, Op::Mul { a, b }, PrimitiveKind::Mul)
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let kind = PrimitiveKind::GlobalAvgPool;
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape(kind.name(), format!("expected rank-4 input, got {xs:?}")));
        }
        let hw = xs[2] * xs[3];
        let denom = T::from_usize(hw).unwrap();
        let out = self
            .value(x)
            .chunks(hw)
            .map(|c| c.iter().copied().sum::<T>() / denom)
            .collect();
        self.push(vec![xs[0], xs[1]], out, Op::GlobalAvgPool { x }, kind)
    }

    /// `y = x W^T + b` with `x: [N, F]`, `W: [O, F]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let kind = PrimitiveKind::Linear;
        let (xs, ws, bs) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bs != [ws[0]] {
            return Err(Error::shape(
                kind.name(),
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let (n, f, o) = (xs[0], xs[1], ws[0]);
        let mut out: Vec<T> = (0..n).flat_map(|_| self.value(b).iter().copied()).collect();
        T::gemm(
            n,
            f,
            o,
            T::one(),
            self.value(x),
            f as isize,
            1,
            self.value(w),
            1,
            f as isize,
            T::one(),
            &mut out,
            o as isize,
            1,
        );
        self.push(vec![n, o], out, Op::Linear { x, w, b }, kind)
    }

    /// Mean cross-entropy of row-wise softmax over `[N, K]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let kind = PrimitiveKind::SoftmaxCrossEntropy;
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() || ls[0] == 0 {
            return Err(Error::shape(
                kind.name(),
                format!("logits {ls:?} with {} labels", labels.len()),
            ));
        }
        let (n, k) = (ls[0], ls[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::shape(kind.name(), format!("label {bad} out of range for {k} classes")));
        }
        let probs = kernels::softmax_rows(self.value(logits), n, k);
        let v = self.value(logits);
        let mut loss = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = &v[i * k..][..k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&l| (l - max).exp()).sum::<T>().ln();
            loss = loss + lse - row[y];
        }
        loss = loss / T::from_usize(n).unwrap();
        self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            kind,
        )
    }

    /// Multiplies `x` by the one-element tensor `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let kind = PrimitiveKind::Scale;
        if self.value(s).len() != 1 {
            return Err(Error::shape(kind.name(), format!("scale factor must be a scalar, got {:?}", self.shape(s))));
        }
        let f = self.value(s)[0];
        let out = self.value(x).iter().map(|&v| v * f).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale { x, s }, kind)
    }

    /// Scales by a constant.
    pub fn scale_by(&mut self, x: Var, factor: T) -> Result<Var> {
        let s = self.constant(Tensor::scalar(factor));
        self.scale(x, s)
    }

    pub fn zero_like(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out = vec![T::zero(); self.value(x).len()];
        self.push(shape, out, Op::ZeroLike { x }, PrimitiveKind::ZeroLike)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum::<T>();
        self.push(vec![1], vec![s], Op::Sum { x }, PrimitiveKind::Sum)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Every requires-grad node reachable from `loss` receives a gradient
    /// (zeros if nothing flows into it); bound parameters get it added to
    /// their gradient buffers.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(Error::NonScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !ln.requires_grad {
            return Ok(Gradients {
                grads,
                shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
            });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let contributions = self.backward_node(node, &dy);
            grads[idx] = Some(dy);
            for (input, g) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, &v)| *b = *b + v),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Op::Leaf { param: Some(p) }, Some(g)) = (&node.op, g) {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::NumericDivergence { primitive: "backward" });
                }
                p.borrow_mut().accumulate_grad(g);
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
        })
    }

    fn backward_node(&self, node: &Node<T>, dy: &[T]) -> Vec<(Var, Vec<T>)> {
        let val = |v: Var| self.value(v);
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf { .. } => vec![],
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) = kernels::conv2d_backward(geom, val(*x), val(*w), dy);
                vec![(*x, dx), (*w, dw)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = &node.shape;
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                if *batch_stats {
                    let (dx, dg, db) =
                        kernels::batchnorm_backward_batch(dy, xhat, n, c, hw, inv_std, val(*gamma));
                    vec![(*x, dx), (*gamma, dg), (*beta, db)]
                } else {
                    let gam = val(*gamma);
                    let mut dx = vec![T::zero(); dy.len()];
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            for j in base..base + hw {
                                dx[j] = dy[j] * gam[ch] * inv_std[ch];
                                dg[ch] = dg[ch] + dy[j] * xhat[j];
                                db[ch] = db[ch] + dy[j];
                            }
                        }
                    }
                    vec![(*x, dx), (*gamma, dg), (*beta, db)]
                }
            }
            Op::Relu { x } => {
                let dx = val(*x)
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                vec![(*x, dx)]
            }
            Op::Add { a, b } => vec![(*a, dy.to_vec()), (*b, dy.to_vec())],
            Op::Mul { a, b } => {
                let da = if needs(*a) {
                    dy.iter().zip(val(*b)).map(|(&g, &v)| g * v).collect()
                } else {
                    vec![]
                };
                let db = if needs(*b) {
                    dy.iter().zip(val(*a)).map(|(&g, &v)| g * v).collect()
                } else {
                    vec![]
                };
                let mut out = Vec::new();
                if needs(*a) {
                    out.push((*a, da));
                }
                if needs(*b) {
                    out.push((*b, db));
                }
                out
            }
            Op::GlobalAvgPool { x } => {
                let xs = self.shape(*x);
                let hw = xs[2] * xs[3];
                let denom = T::from_usize(hw).unwrap();
                let dx = dy
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g / denom, hw))
                    .collect();
                vec![(*x, dx)]
            }
            Op::Linear { x, w, b } => {
                let (n, o) = (node.shape[0], node.shape[1]);
                let f = self.shape(*x)[1];
                let mut dx = vec![T::zero(); n * f];
                T::gemm(n, o, f, T::one(), dy, o as isize, 1, val(*w), f as isize, 1, T::zero(), &mut dx, f as isize, 1);
                let mut dw = vec![T::zero(); o * f];
                T::gemm(o, n, f, T::one(), dy, 1, o as isize, val(*x), f as isize, 1, T::zero(), &mut dw, f as isize, 1);
                let mut db = vec![T::zero(); o];
                for row in dy.chunks(o) {
                    db.iter_mut().zip(row).for_each(|(d, &g)| *d = *d + g);
                }
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::CrossEntropy { logits, probs, labels } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = dy[0] / T::from_usize(n).unwrap();
                let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    dl[i * k + y] = dl[i * k + y] - scale;
                }
                vec![(*logits, dl)]
            }
            Op::Scale { x, s } => {
                let f = val(*s)[0];
                let dx = dy.iter().map(|&g| g * f).collect();
                let ds = vec![dy.iter().zip(val(*x)).map(|(&g, &v)| g * v).sum::<T>()];
                vec![(*x, dx), (*s, ds)]
            }
            Op::ZeroLike { x } => vec![(*x, vec![T::zero(); dy.len()])],
            Op::Sum { x } => vec![(*x, vec![dy[0]; val(*x).len()])],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[3], &[-1.0, 2.0, 0.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y), &[0.0, 2.0, 0.0]);
    }

    #[test]
    fn uniform_logits_give_ln_classes() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[1, 10], &[0.3; 10]));
        let l = g.softmax_cross_entropy(x, &[4]).unwrap();
        assert!((g.value(l)[0] - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).with_requires_grad(true));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn grad_of_product_sum_is_other_factor() {
        let mut g = Graph::<f64>::new();
        let xv = [1.0, 2.0, 3.0];
        let yv = [4.0, -5.0, 6.5];
        let x = g.input(t(&[3], &xv).with_requires_grad(true));
        let y = g.input(t(&[3], &yv).with_requires_grad(true));
        let p = g.mul(x, y).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &yv);
        assert_eq!(grads.get(y).unwrap(), &xv);
    }

    #[test]
    fn reused_value_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let y = g.add(x, x).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_names_primitive() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[2], &[1.0, 2.0]));
        let b = g.input(t(&[3], &[1.0, 2.0, 3.0]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2]") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn non_finite_output_is_divergence() {
        let mut g = Graph::<f64>::new();
        let a = g.input(t(&[1], &[f64::MAX]));
        let err = g.add(a, a).unwrap_err();
        assert!(matches!(err, Error::NumericDivergence { primitive: "add" }));
    }

    #[test]
    fn zero_like_is_exactly_zero_with_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[3], &[1.0, -2.0, 5.0]).with_requires_grad(true));
        let z = g.zero_like(x).unwrap();
        assert!(g.value(z).iter().all(|&v| v == 0.0));
        let s = g.sum(z).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn params_receive_gradients() {
        let p: Param<f64> = Rc::new(RefCell::new(t(&[2], &[3.0, 4.0]).with_requires_grad(true)));
        let mut g = Graph::new();
        let a = g.param(&p);
        let b = g.param(&p);
        let m = g.mul(a, b).unwrap();
        let s = g.sum(m).unwrap();
        g.backward(s).unwrap();
        assert_eq!(p.borrow().grad().unwrap(), &[6.0, 8.0]);
        assert_eq!(g.params().len(), 1);
    }

    #[test]
    fn train_batchnorm_standardizes_channels() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| ((i * 37) % 17) as f64 * 0.3 - 1.0).collect();
        let x = g.input(t(&[2, 3, 4, 4], &data));
        let gamma = g.constant(Tensor::full(vec![3], 1.0));
        let beta = g.constant(Tensor::zeros(vec![3]));
        let y = g.batchnorm2d(x, gamma, beta, None, BnMode::Train).unwrap();
        let out = g.value(y);
        for c in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| out[(n * 3 + c) * 16..][..16].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / 32.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5, "{var}");
        }
    }

    #[test]
    fn calibrate_overwrites_running_statistics() {
        let data: Vec<f64> = (0..2 * 2 * 3 * 3).map(|i| ((i * 29) % 13) as f64 * 0.5).collect();
        let rm: Param<f64> = Rc::new(RefCell::new(Tensor::full(vec![2], 7.0)));
        let rv: Param<f64> = Rc::new(RefCell::new(Tensor::full(vec![2], 7.0)));
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2, 2, 3, 3], &data));
        let gamma = g.constant(Tensor::full(vec![2], 1.0));
        let beta = g.constant(Tensor::zeros(vec![2]));
        let calibrated = g.batchnorm2d(x, gamma, beta, Some((&rm, &rv)), BnMode::Calibrate).unwrap();
        let eval = g.batchnorm2d(x, gamma, beta, Some((&rm, &rv)), BnMode::Eval).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..2).flat_map(|n| data[(n * 2 + c) * 9..][..9].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / 18.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 17.0;
            assert!((rm.borrow().data()[c] - mean).abs() < 1e-12);
            assert!((rv.borrow().data()[c] - var).abs() < 1e-12);
        }
        // eval differs from calibrate only through the unbiased variance
        for (a, b) in g.value(calibrated).iter().zip(g.value(eval)) {
            assert!((a - b * (18.0f64 / 17.0).sqrt()).abs() < 1e-3, "{a} {b}");
        }
    }
}
