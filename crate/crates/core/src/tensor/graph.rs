use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::tensor::{numel, Tensor, TensorId};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Recorded operation with whatever the backward rule needs.
pub(crate) enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Square(Var),
    Sigmoid(Var),
    Silu(Var),
    AddBias { x: Var, b: Var },
    ScaleRows { x: Var, s: Var },
    Repeat { x: Var, outer: usize, times: usize, inner: usize },
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<f64> },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Concat { inputs: Vec<Var>, outer: usize, inners: Vec<usize> },
    Slice { x: Var, outer: usize, full: usize, start: usize, len: usize, inner: usize },
    GatherRows { x: Var, index: Vec<usize> },
    StopGrad,
    Ste(Var),
    AvgPool2d { x: Var, k: usize },
    Filter2d { x: Var, kernel: Vec<T> },
    BceWithLogits { logits: Var, targets: Vec<T> },
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Square(..) => "square",
            Op::Sigmoid(..) => "sigmoid",
            Op::Silu(..) => "silu",
            Op::AddBias { .. } => "add_bias",
            Op::ScaleRows { .. } => "scale_rows",
            Op::Repeat { .. } => "repeat",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::GatherRows { .. } => "gather_rows",
            Op::StopGrad => "stop_grad",
            Op::Ste(..) => "ste",
            Op::AvgPool2d { .. } => "avg_pool2d",
            Op::Filter2d { .. } => "filter2d",
            Op::BceWithLogits { .. } => "bce_with_logits",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![*a, *b],
            Op::AddScalar(x)
            | Op::MulScalar(x, _)
            | Op::Square(x)
            | Op::Sigmoid(x)
            | Op::Silu(x)
            | Op::Softmax(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::Ste(x) => vec![*x],
            // stop_grad is a graph boundary: nothing upstream sees its gradient
            Op::StopGrad => vec![],
            Op::AddBias { x, b } => vec![*x, *b],
            Op::ScaleRows { x, s } => vec![*x, *s],
            Op::Repeat { x, .. }
            | Op::Permute { x, .. }
            | Op::Slice { x, .. }
            | Op::GatherRows { x, .. }
            | Op::AvgPool2d { x, .. }
            | Op::Filter2d { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::BceWithLogits { logits, .. } => vec![*logits],
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Append-only tape of operations.
///
/// Nodes are stored in creation order, which is a topological order, so
/// [`Graph::backward`] walks them once in reverse. Gradients are accumulated
/// (`+=`) into leaves and retained nodes on every backward call until
/// [`Graph::zero_grads`] is called; the recorded forward values are kept so
/// the same graph may be differentiated again.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    bound: HashMap<TensorId, Var>,
    retained: HashSet<usize>,
    grads: HashMap<usize, Vec<T>>,
    pub(crate) matmul_macs: u64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bound: HashMap::new(),
            retained: HashSet::new(),
            grads: HashMap::new(),
            matmul_macs: 0,
        }
    }

    /// Multiply-accumulates performed by forward matrix products so far.
    pub fn matmul_macs(&self) -> u64 {
        self.matmul_macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len(), "{} produced inconsistent shape", op.name());
        if cfg!(debug_assertions) && value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_leaf(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a tensor as a leaf. Repeated calls with the same tensor return
    /// the same node, so shared parameters accumulate one gradient.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.bound.get(&t.id()) {
            return v;
        }
        let v = self.push_leaf(t.shape().to_vec(), t.data().to_vec(), t.is_learnable());
        self.bound.insert(t.id(), v);
        v
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(crate::error::shape_err(
                "constant",
                format!("shape {shape:?} vs {} values", data.len()),
            ));
        }
        Ok(self.push_leaf(shape.to_vec(), data, false))
    }

    /// A leaf that receives gradient without being bound to a tensor.
    pub fn variable(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let v = self.constant(shape, data)?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("node shape is consistent")
    }

    /// Keeps the gradient of an interior node after backward.
    pub fn retain_grad(&mut self, v: Var) {
        self.retained.insert(v.0);
    }

    /// Accumulated gradient of a leaf or retained node.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(&v.0).map(Vec::as_slice)
    }

    /// Accumulated gradient for the leaf bound to `t`.
    pub fn grad_of(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.bound.get(&t.id()).and_then(|v| self.grad(*v))
    }

    /// Adds this graph's gradient for `t` into `t.grad`. Returns whether a
    /// gradient was found.
    pub fn write_grad(&self, t: &mut Tensor<T>) -> Result<bool> {
        match self.grad_of(t).map(<[T]>::to_vec) {
            Some(g) => {
                t.accumulate_grad(&g)?;
                Ok(true)
            }
            None => Ok(false),
        }
    }

    pub fn zero_grads(&mut self) {
        self.grads.clear();
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if numel(&shape) != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut local: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        local[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad && !matches!(node.op, Op::Leaf) {
                self.propagate(i, &g, &mut local);
            }
            let keep = matches!(node.op, Op::Leaf) && node.requires_grad
                || self.retained.contains(&i);
            if keep {
                match self.grads.get_mut(&i) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => {
                        self.grads.insert(i, g);
                    }
                }
            }
        }
        Ok(())
    }

    pub(crate) fn accumulate(&self, local: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.len(), self.nodes[v.0].value.len());
        match &mut local[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }
}
