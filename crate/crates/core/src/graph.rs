//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every node stores its forward
//! value, so building the graph *is* the forward pass. Nodes can only refer to
//! earlier nodes, which makes the tape acyclic and lets [`Graph::backward`]
//! walk it once in reverse.
//!
//! Gradient contributions arriving at a node are summed in ascending order of
//! the consuming node's id, so identical graphs give bit-identical gradients.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::ctc;
use crate::error::{Error, Result};
use crate::tensor::{self, Elementwise, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Affine { x: NodeId, scale: f64 },
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Sum(NodeId),
    LogSoftmax(NodeId),
    Pick { x: NodeId, index: usize },
    LogSumExp(Vec<NodeId>),
    /// CTC negative log-likelihood; the analytic gradient w.r.t. the input
    /// log-probabilities is cached at construction.
    Ctc { x: NodeId, grad: Tensor },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) | Op::MatMulT(a, b) | Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Affine { x, .. }
            | Op::Relu(x)
            | Op::Tanh(x)
            | Op::Sigmoid(x)
            | Op::Sum(x)
            | Op::LogSoftmax(x)
            | Op::Pick { x, .. }
            | Op::Ctc { x, .. } => vec![*x],
            Op::LogSumExp(xs) => xs.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
}

/// Gradients of a scalar loss, one per parameter node.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
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

    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        self.params.binary_search(&id).is_ok()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.push_raw(op, value, requires_grad)
    }

    fn push_raw(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        id
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push_raw(Op::Leaf, value, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        let id = self.push_raw(Op::Leaf, value, true);
        self.params.push(id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(Op::MatMulT(a, b), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, x: NodeId, scale: f64) -> NodeId {
        self.affine(x, scale, 0.0)
    }

    /// `scale * x + shift`, pointwise.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let v = self.value(x).map(|e| scale * e + shift);
        self.push(Op::Affine { x, scale }, v)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).relu();
        self.push(Op::Relu(x), v)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).tanh();
        self.push(Op::Tanh(x), v)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).sigmoid();
        self.push(Op::Sigmoid(x), v)
    }

    pub fn elementwise(&mut self, kind: Elementwise, a: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        match (kind, b) {
            (Elementwise::Relu, None) => Ok(self.relu(a)),
            (Elementwise::Tanh, None) => Ok(self.tanh(a)),
            (Elementwise::Sigmoid, None) => Ok(self.sigmoid(a)),
            (Elementwise::Add, Some(b)) => self.add(a, b),
            (Elementwise::Mul, Some(b)) => self.mul(a, b),
            (k, _) => Err(Error::Contract(format!("wrong operand count for {k:?}"))),
        }
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), v)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Adds scalar nodes left to right.
    pub fn add_all(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = xs
            .split_first()
            .ok_or(Error::EmptyInput("add_all needs at least one node"))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).log_softmax_rows();
        self.push(Op::LogSoftmax(x), v)
    }

    /// Flat row-major element `index` of `x`, as a `[1]` tensor.
    pub fn pick(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let t = self.value(x);
        let v = *t.data().get(index).ok_or_else(|| {
            Error::Contract(format!("index {index} out of range for {:?}", t.shape()))
        })?;
        Ok(self.push(Op::Pick { x, index }, Tensor::scalar(v)))
    }

    /// `log Σ exp` over scalar nodes.
    pub fn log_sum_exp(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::EmptyInput("log_sum_exp over no nodes"));
        }
        let mut vals = Vec::with_capacity(xs.len());
        for &x in xs {
            let t = self.value(x);
            if t.len() != 1 {
                return Err(Error::dims("log_sum_exp", t.shape(), &[1]));
            }
            vals.push(t.item());
        }
        let v = Tensor::scalar(tensor::log_sum_exp(&vals));
        Ok(self.push(Op::LogSumExp(xs.to_vec()), v))
    }

    /// CTC loss of `labels` under the `[T x (V+1)]` log-probabilities in `x`
    /// (blank = last column). Infeasible alignments are a numeric error here,
    /// since an infinite loss cannot be trained on.
    pub fn ctc_loss(&mut self, x: NodeId, labels: &[usize]) -> Result<NodeId> {
        let out = ctc::ctc_loss(self.value(x), labels)?;
        if !out.feasible {
            return Err(Error::Numeric(format!(
                "CTC labels of length {} cannot align to {} frames",
                labels.len(),
                self.value(x).rows()
            )));
        }
        Ok(self.push(Op::Ctc { x, grad: out.grad }, Tensor::scalar(out.loss)))
    }

    /// Reverse-mode gradients of the scalar node `loss` with respect to every
    /// parameter. Parameters unreachable from `loss` get zero gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, node {} has shape {:?}",
                loss.0,
                lv.shape()
            )));
        }
        // Contributions pushed in descending consumer order; summed ascending.
        let mut pending: Vec<Vec<Tensor>> = vec![Vec::new(); loss.0 + 1];
        pending[loss.0].push(Tensor::full(lv.shape(), 1.0));
        let mut grads = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || pending[idx].is_empty() {
                continue;
            }
            let contributions = core::mem::take(&mut pending[idx]);
            let g = accumulate_ascending(contributions);
            let id = NodeId(idx);
            if matches!(node.op, Op::Leaf) {
                if self.is_param(id) {
                    grads.insert(id, g);
                }
                continue;
            }
            for (input, gi) in self.local_grads(node, &g)? {
                if self.nodes[input.0].requires_grad {
                    pending[input.0].push(gi);
                }
            }
        }
        for &p in &self.params {
            grads
                .entry(p)
                .or_insert_with(|| Tensor::zeros(self.value(p).shape()));
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                vec![(*a, g.matmul_t(bv)?), (*b, av.t_matmul(g)?)]
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                vec![(*a, g.matmul(bv)?), (*b, g.t_matmul(av)?)]
            }
            Op::Add(a, b) => {
                let gb = unbroadcast(g, self.value(*b));
                vec![(*a, g.clone()), (*b, gb)]
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = g.mul(bv)?;
                let gb = unbroadcast(&g.mul(av)?, bv);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Affine { x, scale, .. } => vec![(*x, g.scale(*scale))],
            Op::Relu(x) => {
                // relu'(0) = 0
                let xv = self.value(*x);
                let d = Tensor::new(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                        .collect(),
                )?;
                vec![(*x, d)]
            }
            Op::Tanh(x) => {
                let d = zip_with(g, &node.value, |gi, y| gi * (1.0 - y * y))?;
                vec![(*x, d)]
            }
            Op::Sigmoid(x) => {
                let d = zip_with(g, &node.value, |gi, y| gi * y * (1.0 - y))?;
                vec![(*x, d)]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(self.value(*x).shape(), g.item()))],
            Op::LogSoftmax(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut d = Vec::with_capacity(y.len());
                for (grow, yrow) in g.data().chunks(c).zip(y.data().chunks(c)) {
                    let total: f64 = grow.iter().sum();
                    d.extend(
                        grow.iter()
                            .zip(yrow)
                            .map(|(&gi, &yi)| gi - libm::exp(yi) * total),
                    );
                }
                vec![(*x, Tensor::new(y.shape(), d)?)]
            }
            Op::Pick { x, index } => {
                let mut d = Tensor::zeros(self.value(*x).shape());
                d.data_mut()[*index] = g.item();
                vec![(*x, d)]
            }
            Op::LogSumExp(xs) => {
                let y = node.value.item();
                xs.iter()
                    .map(|&x| {
                        let w = libm::exp(self.value(x).item() - y);
                        (x, Tensor::scalar(g.item() * w))
                    })
                    .collect()
            }
            Op::Ctc { x, grad } => vec![(*x, grad.scale(g.item()))],
        };
        Ok(out)
    }
}

fn accumulate_ascending(mut contributions: Vec<Tensor>) -> Tensor {
    contributions.reverse();
    let mut iter = contributions.into_iter();
    let first = iter.next().expect("at least one contribution");
    let mut acc = Tensor::zeros(first.shape());
    for c in core::iter::once(first).chain(iter) {
        for (a, x) in acc.data_mut().iter_mut().zip(c.data()) {
            *a += x;
        }
    }
    acc
}

/// Reduces a gradient to the shape of a (possibly broadcast) operand.
fn unbroadcast(g: &Tensor, operand: &Tensor) -> Tensor {
    if g.shape() == operand.shape() {
        g.clone()
    } else {
        g.sum_rows()
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    Tensor::new(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}
