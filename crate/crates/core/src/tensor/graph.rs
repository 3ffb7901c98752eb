//! Define-by-run tape with reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! execution order, so node ids are already a topological order and the
//! backward pass is a single reverse sweep.

use std::hash::{DefaultHasher, Hash, Hasher};

use super::kernels::{self, ConvParams};
use super::{Shape, Tensor};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::params::{ParamId, ParamStore};

/// Probability floor inside `-ln p` losses.
pub const LOG_EPS: f32 = 1e-9;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One box-regression term of a smooth-L1 loss: the four predicted values
/// `(t_x, t_y, t_w, t_h)` live at `offset + v * stride` for `v = 0..4`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegressionTerm {
    pub offset: usize,
    pub stride: usize,
    pub target: [f32; 4],
    pub weight: f32,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        params: ConvParams,
        cols: Vec<f32>,
    },
    Relu(NodeId),
    Max(NodeId, NodeId),
    Add(NodeId, NodeId),
    Concat(NodeId, NodeId),
    Upsample2x(NodeId),
    Gather {
        x: NodeId,
        argmax: Vec<u32>,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Softmax(NodeId),
    WeightedSum {
        x: NodeId,
        weights: Vec<f32>,
    },
    SoftmaxXent {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f32>,
        weight: f32,
    },
    SigmoidXent {
        logits: NodeId,
        picks: Vec<(usize, bool)>,
        weight: f32,
    },
    SmoothL1 {
        pred: NodeId,
        terms: Vec<RegressionTerm>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::Relu(x) | Op::Upsample2x(x) | Op::Softmax(x) => vec![*x],
            Op::Max(a, b) | Op::Add(a, b) | Op::Concat(a, b) => vec![*a, *b],
            Op::Gather { x, .. } | Op::WeightedSum { x, .. } => vec![*x],
            Op::SoftmaxXent { logits, .. } | Op::SigmoidXent { logits, .. } => vec![*logits],
            Op::SmoothL1 { pred, .. } => vec![*pred],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(_) => "relu",
            Op::Max(..) => "max_merge",
            Op::Add(..) => "add",
            Op::Concat(..) => "concat_channels",
            Op::Upsample2x(_) => "upsample2x",
            Op::Gather { .. } => "pool",
            Op::Linear { .. } => "linear",
            Op::Softmax(_) => "softmax",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::SoftmaxXent { .. } => "softmax_cross_entropy",
            Op::SigmoidXent { .. } => "sigmoid_cross_entropy",
            Op::SmoothL1 { .. } => "smooth_l1",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    param: Option<ParamId>,
    grad: Option<Vec<f32>>,
    retain: bool,
}

/// Tape of tensor operations supporting reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn smooth_l1_grad(z: f32) -> f32 {
    if z.abs() <= 1.0 {
        z
    } else {
        z.signum()
    }
}

fn softplus(z: f32) -> f32 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, id: NodeId) -> f32 {
        self.nodes[id.0].value.data()[0]
    }

    /// Keeps the gradient of an intermediate node after [`Graph::backward`].
    pub fn retain_grad(&mut self, id: NodeId) {
        self.nodes[id.0].retain = true;
    }

    /// Accumulated gradient of a leaf created with [`Graph::input_with_grad`]
    /// or [`Graph::param`], or of a node marked with [`Graph::retain_grad`],
    /// available after [`Graph::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Gradients held for every parameter leaf.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f32])> {
        self.nodes.iter().filter_map(|n| Some((n.param?, n.grad.as_deref()?)))
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        value.check_finite(op.name())?;
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            param: None,
            grad: None,
            retain: false,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool, param: Option<ParamId>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
            param,
            grad: None,
            retain: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked for it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false, None)
    }

    /// Input whose gradient is kept after the backward pass.
    pub fn input_with_grad(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true, None)
    }

    /// Leaf holding a copy of a stored parameter; its gradient is later
    /// folded back with [`ParamStore::accumulate_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let mut value = store.get(id).clone();
        value.clear_grad();
        self.leaf(value, true, Some(id))
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, params: ConvParams) -> Result<NodeId> {
        let (out, cols) = kernels::conv2d_forward(self.value(x), self.value(w), self.value(b), params)?;
        self.push(Op::Conv2d { x, w, b, params, cols }, out)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = kernels::relu(self.value(x));
        self.push(Op::Relu(x), out)
    }

    /// Elementwise maximum; ties send the gradient to `p`.
    pub fn max_merge(&mut self, p: NodeId, q: NodeId) -> Result<NodeId> {
        let out = kernels::max_merge(self.value(p), self.value(q))?;
        self.push(Op::Max(p, q), out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = kernels::add(self.value(a), self.value(b))?;
        self.push(Op::Add(a, b), out)
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = kernels::concat_channels(self.value(a), self.value(b))?;
        self.push(Op::Concat(a, b), out)
    }

    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        let out = kernels::upsample2x(self.value(x))?;
        self.push(Op::Upsample2x(x), out)
    }

    /// RoI max pooling of `rois` from the single feature map `x`. Returns the
    /// pooled batch and a per-roi degenerate flag.
    pub fn roi_pool(
        &mut self,
        x: NodeId,
        rois: &[BBox],
        out_h: usize,
        out_w: usize,
        spatial_stride: f32,
    ) -> Result<(NodeId, Vec<bool>)> {
        let pooled = kernels::roi_pool(self.value(x), rois, out_h, out_w, spatial_stride)?;
        let id = self.push(
            Op::Gather {
                x,
                argmax: pooled.argmax,
            },
            pooled.output,
        )?;
        Ok((id, pooled.degenerate))
    }

    pub fn max_pool2x2(&mut self, x: NodeId) -> Result<NodeId> {
        let (out, argmax) = kernels::max_pool2x2(self.value(x));
        self.push(Op::Gather { x, argmax }, out)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let out = kernels::linear(self.value(x), self.value(w), self.value(b))?;
        self.push(Op::Linear { x, w, b }, out)
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let out = kernels::softmax(self.value(x));
        self.push(Op::Softmax(x), out)
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let weights = vec![1.0; self.value(x).numel()];
        self.weighted_sum(x, weights)
    }

    /// Scalar `sum_i weights[i] * x[i]`.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Vec<f32>) -> Result<NodeId> {
        let xv = self.value(x);
        if weights.len() != xv.numel() {
            return Err(Error::LengthMismatch(format!(
                "{} weights for {} values",
                weights.len(),
                xv.numel()
            )));
        }
        let total = xv.data().iter().zip(&weights).map(|(a, b)| a * b).sum::<f32>();
        self.push(Op::WeightedSum { x, weights }, Tensor::full([1, 1, 1, 1], total))
    }

    /// `weight * sum_i -ln max(softmax(logits_i)[labels[i]], eps)` over the
    /// batch rows of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize], weight: f32) -> Result<NodeId> {
        let lv = self.value(logits);
        let (s, k) = (lv.shape(), lv.shape().sample_len());
        if labels.len() != s.n {
            return Err(Error::LengthMismatch(format!(
                "{} labels for {} rows",
                labels.len(),
                s.n
            )));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= k) {
            return Err(Error::LengthMismatch(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let probs = kernels::softmax(lv);
        let cap = -LOG_EPS.ln();
        let mut total = 0.0f32;
        for (row, &label) in lv.data().chunks_exact(k).zip(labels) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
            total += (lse - row[label]).min(cap);
        }
        self.push(
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs: probs.into_data(),
                weight,
            },
            Tensor::full([1, 1, 1, 1], weight * total),
        )
    }

    /// Binary cross-entropy over selected logits, each `(flat index, is_positive)`,
    /// scaled by `weight`.
    pub fn sigmoid_cross_entropy(&mut self, logits: NodeId, picks: &[(usize, bool)], weight: f32) -> Result<NodeId> {
        let lv = self.value(logits);
        if let Some((bad, _)) = picks.iter().find(|(i, _)| *i >= lv.numel()) {
            return Err(Error::LengthMismatch(format!("logit index {bad} out of range")));
        }
        let cap = -LOG_EPS.ln();
        let total: f32 = picks
            .iter()
            .map(|&(i, pos)| {
                let z = lv.data()[i];
                (if pos { softplus(-z) } else { softplus(z) }).min(cap)
            })
            .sum();
        self.push(
            Op::SigmoidXent {
                logits,
                picks: picks.to_vec(),
                weight,
            },
            Tensor::full([1, 1, 1, 1], weight * total),
        )
    }

    /// `sum_terms weight * sum_v smooth_l1(pred[offset + v*stride] - target[v])`.
    pub fn smooth_l1(&mut self, pred: NodeId, terms: Vec<RegressionTerm>) -> Result<NodeId> {
        let pv = self.value(pred);
        let mut total = 0.0f32;
        for t in &terms {
            if t.offset + 3 * t.stride >= pv.numel() {
                return Err(Error::LengthMismatch(format!(
                    "regression term at {} (stride {}) exceeds {} predictions",
                    t.offset,
                    t.stride,
                    pv.numel()
                )));
            }
            for v in 0..4 {
                total += t.weight * crate::training::smooth_l1(pv.data()[t.offset + v * t.stride] - t.target[v]);
            }
        }
        self.push(Op::SmoothL1 { pred, terms }, Tensor::full([1, 1, 1, 1], total))
    }

    /// Back-propagates from the scalar `loss` with unit seed.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.backward_with_seed(loss, 1.0)
    }

    /// Back-propagates `seed * dloss`. Gradients of leaves accumulate across
    /// calls until the graph is dropped.
    pub fn backward_with_seed(&mut self, loss: NodeId, seed: f32) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("unknown node {}", loss.0)));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Graph(format!(
                "loss must be scalar, got {}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for (id, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if node.op.inputs().iter().any(|i| i.0 >= id) {
                return Err(Error::Graph(format!("cycle detected at node {id}")));
            }
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![seed]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(id, &g, &mut grads);
            if node.retain {
                grads[id] = Some(g);
            }
        }
        for (id, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &mut self.nodes[id];
            if !matches!(node.op, Op::Leaf) && !node.retain {
                continue;
            }
            match node.grad.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, id: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let acc = |grads: &mut [Option<Vec<f32>>], target: NodeId, delta: Vec<f32>| match grads[target.0].as_mut() {
            Some(existing) => existing.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
            None => grads[target.0] = Some(delta),
        };
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, params, cols } => {
                let cg =
                    kernels::conv2d_backward(self.value(*x).shape(), self.value(*w), cols, g, *params, self.wants(*x));
                if let Some(dx) = cg.dx {
                    acc(grads, *x, dx);
                }
                if self.wants(*w) {
                    acc(grads, *w, cg.dw);
                }
                if self.wants(*b) {
                    acc(grads, *b, cg.db);
                }
            }
            Op::Relu(x) => acc(grads, *x, kernels::relu_backward(self.value(*x), g)),
            Op::Max(p, q) => {
                let (dp, dq) = kernels::max_merge_backward(self.value(*p), self.value(*q), g);
                if self.wants(*p) {
                    acc(grads, *p, dp);
                }
                if self.wants(*q) {
                    acc(grads, *q, dq);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.to_vec());
                }
            }
            Op::Concat(a, b) => {
                let (da, db) = kernels::concat_channels_backward(self.value(*a).shape(), self.value(*b).shape(), g);
                if self.wants(*a) {
                    acc(grads, *a, da);
                }
                if self.wants(*b) {
                    acc(grads, *b, db);
                }
            }
            Op::Upsample2x(x) => acc(grads, *x, kernels::upsample2x_backward(self.value(*x).shape(), g)),
            Op::Gather { x, argmax } => acc(grads, *x, kernels::scatter_argmax(self.value(*x).numel(), argmax, g)),
            Op::Linear { x, w, b } => {
                let lg = kernels::linear_backward(self.value(*x), self.value(*w), g, self.wants(*x));
                if let Some(dx) = lg.dx {
                    acc(grads, *x, dx);
                }
                if self.wants(*w) {
                    acc(grads, *w, lg.dw);
                }
                if self.wants(*b) {
                    acc(grads, *b, lg.db);
                }
            }
            Op::Softmax(x) => acc(grads, *x, kernels::softmax_backward(&node.value, g)),
            Op::WeightedSum { x, weights } => acc(grads, *x, weights.iter().map(|w| w * g[0]).collect()),
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
                weight,
            } => {
                let k = self.value(*logits).shape().sample_len();
                let scale = weight * g[0];
                let mut d = vec![0.0f32; probs.len()];
                for (r, &label) in labels.iter().enumerate() {
                    let row = &probs[r * k..(r + 1) * k];
                    if row[label] < LOG_EPS {
                        continue;
                    }
                    for (j, p) in row.iter().enumerate() {
                        d[r * k + j] = scale * (p - if j == label { 1.0 } else { 0.0 });
                    }
                }
                acc(grads, *logits, d);
            }
            Op::SigmoidXent { logits, picks, weight } => {
                let lv = self.value(*logits);
                let scale = weight * g[0];
                let cap = -LOG_EPS.ln();
                let mut d = vec![0.0f32; lv.numel()];
                for &(i, pos) in picks {
                    let z = lv.data()[i];
                    let loss = if pos { softplus(-z) } else { softplus(z) };
                    if loss >= cap {
                        continue;
                    }
                    d[i] += scale * (kernels::sigmoid(z) - if pos { 1.0 } else { 0.0 });
                }
                acc(grads, *logits, d);
            }
            Op::SmoothL1 { pred, terms } => {
                let pv = self.value(*pred);
                let mut d = vec![0.0f32; pv.numel()];
                for t in terms {
                    for v in 0..4 {
                        let i = t.offset + v * t.stride;
                        d[i] += g[0] * t.weight * smooth_l1_grad(pv.data()[i] - t.target[v]);
                    }
                }
                acc(grads, *pred, d);
            }
        }
    }

    /// Hash of every discrete decision taken in the forward pass: ReLU
    /// activity, max-merge winners, pooling argmaxes, smooth-L1 regimes and
    /// log clamps. Two forward passes with equal signatures lie on the same
    /// smooth piece of the loss surface.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => self.value(*x).data().iter().for_each(|v| (*v > 0.0).hash(&mut h)),
                Op::Max(p, q) => self
                    .value(*p)
                    .data()
                    .iter()
                    .zip(self.value(*q).data())
                    .for_each(|(a, b)| (a >= b).hash(&mut h)),
                Op::Gather { argmax, .. } => argmax.hash(&mut h),
                Op::SmoothL1 { pred, terms } => {
                    let pv = self.value(*pred).data();
                    for t in terms {
                        for v in 0..4 {
                            ((pv[t.offset + v * t.stride] - t.target[v]).abs() <= 1.0).hash(&mut h);
                        }
                    }
                }
                Op::SoftmaxXent { labels, probs, .. } => {
                    let k = probs.len() / labels.len().max(1);
                    for (r, &l) in labels.iter().enumerate() {
                        (probs[r * k + l] < LOG_EPS).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Shape of a node's value.
    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].value.shape()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_sum_gradient_is_ones_on_positive_inputs() {
        let mut g = Graph::new();
        let x = g.input_with_grad(Tensor::from_fn([1, 2, 3, 3], |_, c, y, x| 0.5 + (c + y + x) as f32));
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.input_with_grad(Tensor::full([1, 1, 1, 3], 2.0));
        let s = g.weighted_sum(x, vec![1.0, 2.0, 3.0]).unwrap();
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn zero_seed_gives_zero_param_grads() {
        let mut store = ParamStore::new();
        let wid = store.add("w", Tensor::full([2, 1, 3, 3], 0.1)).unwrap();
        let bid = store.add("b", Tensor::full([1, 2, 1, 1], 0.2)).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::full([1, 1, 5, 5], 1.0));
        let (w, b) = (g.param(&store, wid), g.param(&store, bid));
        let y = g.conv2d(x, w, b, ConvParams::valid()).unwrap();
        let s = g.sum(y).unwrap();
        g.backward_with_seed(s, 0.0).unwrap();
        store.accumulate_grads(&g);
        assert!(store.get(wid).grad().unwrap().iter().all(|v| *v == 0.0));
        assert!(store.get(bid).grad().unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.input_with_grad(Tensor::zeros([1, 1, 2, 2]));
        assert!(matches!(g.backward(x), Err(Error::Graph(_))));
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full([1, 1, 1, 2], f32::MAX));
        assert!(matches!(g.add(x, x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let l = g.input_with_grad(Tensor::zeros([2, 4, 1, 1]));
        let loss = g.softmax_cross_entropy(l, &[0, 3], 0.5).unwrap();
        assert!((g.scalar(loss) - 4f32.ln()).abs() < 1e-6);
        g.backward(loss).unwrap();
        let d = g.grad(l).unwrap();
        assert!((d[0] - 0.5 * (0.25 - 1.0)).abs() < 1e-7);
        assert!((d[1] - 0.5 * 0.25).abs() < 1e-7);
        assert!((d[7] - 0.5 * (0.25 - 1.0)).abs() < 1e-7);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let run = || {
            let mut g = Graph::new();
            let x = g.input(Tensor::from_fn([1, 3, 9, 9], |_, c, y, x| {
                ((c * 31 + y * 7 + x) % 11) as f32 * 0.1
            }));
            let w = g.input(Tensor::from_fn([4, 3, 3, 3], |n, c, y, x| {
                ((n + c * 3 + y * 5 + x) % 7) as f32 * 0.05 - 0.1
            }));
            let b = g.input(Tensor::full([1, 4, 1, 1], 0.01));
            let y = g.conv2d(x, w, b, ConvParams::valid()).unwrap();
            g.value(y).clone()
        };
        assert_eq!(run(), run());
    }
}
