use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds, used for reporting and for the backward fault-injection hook.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    AddRowBias,
    Scale,
    Relu,
    Gelu,
    Exp,
    Log,
    Matmul,
    Transpose,
    Reshape,
    Concat,
    Sum,
    Mean,
    Max,
    Softmax,
    LogSoftmax,
    LayerNorm,
    Gather,
    Conv2d,
    MaxPool2d,
}

impl OpKind {
    pub fn parse(name: &str) -> Option<Self> {
        use OpKind::*;
        let all = [
            Add, Sub, Mul, AddRowBias, Scale, Relu, Gelu, Exp, Log, Matmul, Transpose, Reshape,
            Concat, Sum, Mean, Max, Softmax, LogSoftmax, LayerNorm, Gather, Conv2d, MaxPool2d,
        ];
        all.into_iter()
            .find(|k| format!("{k:?}").eq_ignore_ascii_case(name))
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Sum(Var),
    Mean { x: Var, axis: usize },
    Max { x: Var, argmax: Vec<usize>, margin: T },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gather { x: Var, index: Vec<usize> },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        cols: Vec<T>,
        geom: ConvGeom,
    },
    MaxPool2d { x: Var, argmax: Vec<usize>, margin: T },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRowBias(..) => OpKind::AddRowBias,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(_) => OpKind::Relu,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Matmul(..) => OpKind::Matmul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Max { .. } => OpKind::Max,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LogSoftmax { .. } => OpKind::LogSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gather { .. } => OpKind::Gather,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
        }
    }
}

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub requires_grad: bool,
    pub grad: Option<Tensor<T>>,
}

/// Record of executed primitives. Nodes are appended in execution order, so
/// the node list is a topological order and backward walks it in reverse.
///
/// A graph is single-use: one forward, one backward.
pub struct Graph<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    consumed: bool,
    tamper: Option<(OpKind, T)>,
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
            consumed: false,
            tamper: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Fault injection: scale every gradient produced by backward rules of
    /// `kind`. Only used to prove that the gradient checker catches bad rules.
    pub fn tamper_backward(&mut self, kind: OpKind, factor: f64) {
        self.tamper = Some((kind, T::of(factor)));
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`]. Always `None`
    /// for nodes that do not require gradients.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Distance of the recorded forward pass from the nearest point where a
    /// piecewise-linear op switches branch: the smallest |input| of any relu
    /// and the smallest winner-to-runner-up gap of any max. Infinite when the
    /// graph has no such op. Finite-difference probes smaller than this
    /// margin (times the input sensitivity) stay on one smooth piece.
    pub fn kink_margin(&self) -> f64 {
        self.nodes
            .iter()
            .map(|n| match &n.op {
                Op::Relu(x) => self.nodes[x.0]
                    .value
                    .data()
                    .iter()
                    .map(|v| v.as_f64().abs())
                    .fold(f64::INFINITY, f64::min),
                Op::Max { margin, .. } | Op::MaxPool2d { margin, .. } => margin.as_f64(),
                _ => f64::INFINITY,
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Smallest per-row standard deviation seen by any layer norm; rows
    /// close to constant make the normalization sharply curved.
    pub fn min_layer_norm_std(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::LayerNorm { inv_std, .. } => inv_std
                    .iter()
                    .map(|v| 1.0 / v.as_f64())
                    .reduce(f64::min),
                _ => None,
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Weakest GELU unit: for each unit (last axis) the largest input over all
    /// rows, minimized over units and layers. A unit whose inputs all sit deep
    /// in the negative tail is effectively dead and its gradients vanish.
    pub fn min_gelu_unit_peak(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Gelu(x) => {
                    let v = &self.nodes[x.0].value;
                    let width = *v.shape().last()?;
                    let mut peak = vec![f64::NEG_INFINITY; width];
                    for row in v.data().chunks(width) {
                        for (p, a) in peak.iter_mut().zip(row) {
                            *p = p.max(a.as_f64());
                        }
                    }
                    peak.into_iter().reduce(f64::min)
                }
                _ => None,
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Reverse pass from a scalar loss. Every trainable leaf receives its
    /// accumulated gradient (zeros when the loss does not depend on it).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }

        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            if let Some((kind, factor)) = self.tamper {
                if node.op.kind() == kind {
                    g.iter_mut().for_each(|v| *v *= factor);
                }
            }
            super::ops::backward_rule(&self.nodes, i, &g, &mut grads);
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if let (Op::Leaf, true) = (&node.op, node.requires_grad) {
                let data = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![T::zero(); node.value.len()]);
                node.grad = Some(Tensor {
                    shape: node.value.shape().to_vec(),
                    data,
                });
            }
        }
        Ok(())
    }
}
