//! Tape-style computation graph with reverse-mode gradient propagation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` walks it in reverse.

use std::rc::Rc;

use super::norm::NormSaved;
use super::params::{ParamId, ParamStore};
use super::recurrent::LstmSaved;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a * x + b`; only the slope matters for the gradient.
    Affine(Var, f64),
    Sum(Var),
    WeightedSum(Var, Rc<Vec<f64>>),
    Relu(Var),
    Prelu { x: Var, slope: Var, inner: usize },
    Sigmoid(Var),
    Tanh(Var),
    Conv1d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvTranspose1d { x: Var, w: Var, stride: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    Norm(Box<NormSaved>),
    AvgPoolTime(Var),
    Lstm(Box<LstmSaved>),
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
    ConcatLast { a: Var, b: Var },
    FitLast { x: Var },
    ScaleShiftTime { x: Var, scale: Var, shift: Option<Var> },
    MaskApply { mask: Var, feat: Var },
    WeightedPoolTime { x: Var, w: Var },
    NormalizeRows(Var),
    SiSnrPairs(Box<super::lossops::SiSnrSaved>),
    Gather { x: Var, idx: Rc<Vec<usize>> },
    CrossEntropy { logits: Var, labels: Rc<Vec<usize>>, probs: Vec<f64> },
    Segment { x: Var, geom: super::shape::ChunkGeometry },
    OverlapAdd { x: Var, geom: super::shape::ChunkGeometry },
}

pub(crate) struct Node {
    pub tensor: Tensor,
    pub op: Op,
    pub needs_grad: bool,
}

/// Pending running-statistics update produced by a train-mode batch norm.
#[derive(Debug, Clone)]
pub struct StatUpdate {
    pub mean_buffer: super::params::BufferId,
    pub var_buffer: super::params::BufferId,
    pub batch_mean: Vec<f64>,
    pub batch_var_unbiased: Vec<f64>,
}

#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    param_links: Vec<(Var, ParamId)>,
    stat_updates: Vec<StatUpdate>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a leaf. Its `requires_grad` flag decides whether backward
    /// fills its gradient.
    pub fn input(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad;
        self.push_node(tensor, Op::Leaf, needs_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.input(tensor.with_requires_grad(false))
    }

    /// Leaf bound to a model parameter; see [`Graph::write_param_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let mut t = store.get(id).tensor.clone();
        t.requires_grad = true;
        t.grad = None;
        let v = self.push_node(t, Op::Leaf, true);
        self.param_links.push((v, id));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].tensor.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad.as_deref()
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    pub(crate) fn record_stat_update(&mut self, u: StatUpdate) {
        self.stat_updates.push(u);
    }

    pub(crate) fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn push_op(&mut self, tensor: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|&v| self.nodes[v.0].needs_grad);
        self.push_node(tensor, op, needs_grad)
    }

    fn push_node(&mut self, tensor: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { tensor, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Adds gradients of every parameter leaf into the store.
    pub fn write_param_grads(&self, store: &mut ParamStore) {
        for &(v, id) in &self.param_links {
            if let Some(g) = self.grad(v) {
                store.get_mut(id).tensor.accumulate_grad(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.tensor.grad = None;
        }
    }

    /// Reverse-mode sweep from a one-element loss. Gradients are added to
    /// whatever the leaves already hold, so two calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must hold one element, got shape {:?}", self.shape(loss)),
            ));
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if self.nodes[i].tensor.requires_grad {
                self.nodes[i].tensor.accumulate_grad(&g);
            }
            let mut sink = GradSink { graph: self, adj: &mut adj };
            sink.propagate(i, &g);
        }
        Ok(())
    }

    // ---- elementwise & reductions -------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn map_unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.data().iter().map(|&v| f(v)).collect(), t.shape()).unwrap();
        self.push_op(out, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let d = zip_map(self.data(a), self.data(b), |x, y| x + y);
        let out = Tensor::new(d, self.shape(a))?;
        Ok(self.push_op(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let d = zip_map(self.data(a), self.data(b), |x, y| x - y);
        let out = Tensor::new(d, self.shape(a))?;
        Ok(self.push_op(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let d = zip_map(self.data(a), self.data(b), |x, y| x * y);
        let out = Tensor::new(d, self.shape(a))?;
        Ok(self.push_op(out, Op::Mul(a, b), &[a, b]))
    }

    /// `scale * x + offset`.
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Var {
        self.map_unary(x, |v| scale * v + offset, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `sum_i w_i * x_i` for constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        if weights.len() != self.value(x).numel() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} weights for {:?}", weights.len(), self.shape(x)),
            ));
        }
        let s = self.data(x).iter().zip(&weights).map(|(a, b)| a * b).sum();
        Ok(self.push_op(Tensor::scalar(s), Op::WeightedSum(x, Rc::new(weights)), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map_unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map_unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map_unary(x, f64::tanh, Op::Tanh(x))
    }

    /// PReLU with one learnable slope per feature map (axis 1).
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let ch = *shape.get(1).unwrap_or(&1);
        if shape.len() < 2 || self.value(slope).numel() != ch {
            return Err(Error::shape(
                "prelu",
                format!("input {shape:?} needs {ch} slopes, got {:?}", self.shape(slope)),
            ));
        }
        let inner: usize = shape[2..].iter().product();
        let a = self.data(slope).to_vec();
        let d = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| if v > 0.0 { v } else { a[(i / inner) % ch] * v })
            .collect();
        let out = Tensor::new(d, &shape)?;
        Ok(self.push_op(out, Op::Prelu { x, slope, inner }, &[x, slope]))
    }

    /// Mean over the last (time) axis of `[batch, ch, time]`.
    pub fn avg_pool_time(&mut self, x: Var) -> Result<Var> {
        let [b, c, t] = rank3("avg_pool_time", self.shape(x))?;
        let d = self
            .data(x)
            .chunks(t)
            .map(|row| row.iter().sum::<f64>() / t as f64)
            .collect();
        let out = Tensor::new(d, &[b, c])?;
        Ok(self.push_op(out, Op::AvgPoolTime(x), &[x]))
    }

    /// Picks the flat positions `idx` of `x` into a 1-D tensor.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let n = self.value(x).numel();
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return Err(Error::invalid(format!("gather index out of range for {n} values")));
        }
        let src = self.data(x);
        let d: Vec<f64> = idx.iter().map(|&i| src[i]).collect();
        let len = d.len();
        let out = Tensor::new(d, &[len])?;
        Ok(self.push_op(out, Op::Gather { x, idx: Rc::new(idx) }, &[x]))
    }
}

/// Backward helper: owns mutable access to the adjoint table.
pub(crate) struct GradSink<'a> {
    pub graph: &'a Graph,
    adj: &'a mut Vec<Option<Vec<f64>>>,
}

impl GradSink<'_> {
    /// Runs `f` on the adjoint buffer of `v` (zero-initialised on first use)
    /// when `v` participates in gradient flow.
    pub fn with(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.graph.needs_grad(v) {
            return;
        }
        let n = self.graph.value(v).numel();
        let buf = self.adj[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(buf);
    }

    pub fn wants(&self, v: Var) -> bool {
        self.graph.needs_grad(v)
    }

    fn add_scaled(&mut self, v: Var, g: &[f64], s: f64) {
        self.with(v, |buf| buf.iter_mut().zip(g).for_each(|(a, b)| *a += s * b));
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let graph = self.graph;
        let node = &graph.nodes[i];
        let out = node.tensor.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_scaled(*a, g, 1.0);
                self.add_scaled(*b, g, 1.0);
            }
            Op::Sub(a, b) => {
                self.add_scaled(*a, g, 1.0);
                self.add_scaled(*b, g, -1.0);
            }
            Op::Mul(a, b) => {
                let (da, db) = (graph.data(*a), graph.data(*b));
                self.with(*a, |buf| {
                    for ((o, gi), y) in buf.iter_mut().zip(g).zip(db) {
                        *o += gi * y;
                    }
                });
                self.with(*b, |buf| {
                    for ((o, gi), x) in buf.iter_mut().zip(g).zip(da) {
                        *o += gi * x;
                    }
                });
            }
            Op::Affine(x, s) => self.add_scaled(*x, g, *s),
            Op::Sum(x) => {
                let g0 = g[0];
                self.with(*x, |buf| buf.iter_mut().for_each(|o| *o += g0));
            }
            Op::WeightedSum(x, w) => {
                let g0 = g[0];
                self.with(*x, |buf| buf.iter_mut().zip(w.iter()).for_each(|(o, wi)| *o += g0 * wi));
            }
            Op::Relu(x) => {
                let xd = graph.data(*x);
                self.with(*x, |buf| {
                    for ((o, gi), v) in buf.iter_mut().zip(g).zip(xd) {
                        if *v > 0.0 {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Prelu { x, slope, inner } => {
                let xd = graph.data(*x);
                let a = graph.data(*slope);
                let ch = a.len();
                let inner = *inner;
                self.with(*x, |buf| {
                    for (k, (o, gi)) in buf.iter_mut().zip(g).enumerate() {
                        // Derivative at exactly zero uses the negative-side slope.
                        *o += if xd[k] > 0.0 { *gi } else { a[(k / inner) % ch] * gi };
                    }
                });
                self.with(*slope, |buf| {
                    for (k, gi) in g.iter().enumerate() {
                        if xd[k] <= 0.0 {
                            buf[(k / inner) % ch] += gi * xd[k];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                self.with(*x, |buf| {
                    for ((o, gi), y) in buf.iter_mut().zip(g).zip(out) {
                        *o += gi * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh(x) => {
                self.with(*x, |buf| {
                    for ((o, gi), y) in buf.iter_mut().zip(g).zip(out) {
                        *o += gi * (1.0 - y * y);
                    }
                });
            }
            Op::AvgPoolTime(x) => {
                let t = graph.shape(*x)[2];
                let inv = 1.0 / t as f64;
                self.with(*x, |buf| {
                    for (row, gi) in buf.chunks_mut(t).zip(g) {
                        row.iter_mut().for_each(|o| *o += gi * inv);
                    }
                });
            }
            Op::Gather { x, idx } => {
                self.with(*x, |buf| {
                    for (&j, gi) in idx.iter().zip(g) {
                        buf[j] += gi;
                    }
                });
            }
            Op::Conv1d { x, w, b, stride, pad } => {
                super::conv::conv1d_backward(self, *x, *w, *b, *stride, *pad, g)
            }
            Op::ConvTranspose1d { x, w, stride } => {
                super::conv::conv_transpose1d_backward(self, *x, *w, *stride, g)
            }
            Op::Linear { x, w, b } => super::conv::linear_backward(self, *x, *w, *b, g),
            Op::Norm(saved) => super::norm::norm_backward(self, saved, g),
            Op::Lstm(saved) => super::recurrent::lstm_backward(self, saved, out, g),
            Op::Permute { x, axes } => super::shape::permute_backward(self, *x, axes, g),
            Op::Reshape(x) => self.add_scaled(*x, g, 1.0),
            Op::ConcatLast { a, b } => super::shape::concat_last_backward(self, *a, *b, g),
            Op::FitLast { x } => super::shape::fit_last_backward(self, *x, node.tensor.shape(), g),
            Op::ScaleShiftTime { x, scale, shift } => {
                super::shape::scale_shift_time_backward(self, *x, *scale, *shift, g)
            }
            Op::MaskApply { mask, feat } => super::shape::mask_apply_backward(self, *mask, *feat, g),
            Op::WeightedPoolTime { x, w } => super::shape::weighted_pool_backward(self, *x, *w, g),
            Op::NormalizeRows(x) => super::shape::normalize_rows_backward(self, *x, out, g),
            Op::SiSnrPairs(saved) => super::lossops::si_snr_pairs_backward(self, saved, g),
            Op::CrossEntropy { logits, labels, probs } => {
                super::lossops::cross_entropy_backward(self, *logits, labels, probs, g)
            }
            Op::Segment { x, geom } => super::shape::segment_backward(self, *x, geom, g),
            Op::OverlapAdd { x, geom } => super::shape::overlap_add_backward(self, *x, geom, g),
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

pub(crate) fn rank3(op: &'static str, shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        &[a, b, c] => Ok([a, b, c]),
        _ => Err(Error::shape(op, format!("expected [batch, ch, time], got {shape:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, d: &[f64]) -> Var {
        g.input(Tensor::new(d.to_vec(), &[d.len()]).unwrap().with_requires_grad(true))
    }

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1.0, -2.0, 3.0]);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1.0, 2.0]);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1.0, 2.0]);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0]);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1.0, 2.0]);
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::Shape { .. })));
    }

    #[test]
    fn activations() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![-1.0, 0.0, 2.0], &[3]).unwrap());
        let r = g.relu(x);
        assert_eq!(g.data(r), &[0.0, 0.0, 2.0]);
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(z);
        assert_eq!(g.data(s), &[0.5]);
        let x = g.constant(Tensor::new(vec![-2.0], &[1, 1]).unwrap());
        let a = g.constant(Tensor::new(vec![0.25], &[1]).unwrap());
        let p = g.prelu(x, a).unwrap();
        assert_eq!(g.data(p), &[-0.5]);
    }

    #[test]
    fn prelu_kink_uses_negative_slope() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![0.0, 1.0], &[1, 2]).unwrap().with_requires_grad(true));
        let a = g.input(Tensor::new(vec![0.3, 0.7], &[2]).unwrap().with_requires_grad(true));
        let p = g.prelu(x, a).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.3, 1.0]);
        let r = g.relu(x);
        let s = g.sum(r);
        g.zero_grad();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn avg_pool() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1.0, 3.0], &[1, 1, 2]).unwrap().with_requires_grad(true));
        let p = g.avg_pool_time(x).unwrap();
        assert_eq!(g.data(p), &[2.0]);
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.5, 0.5]);
    }
}
