//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles during a
//! forward pass. [`Tape::backward`] walks the record in reverse and returns
//! the accumulated [`Gradients`]. A tape lives for one training step; model
//! parameters are copied in as leaves and their gradients read back out.

mod kernels;
mod ops;

pub(crate) use ops::local_attention;

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::tensor::Tensor;


#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Bmm { a: usize, b: usize, trans_b: bool },
    Linear { x: usize, w: usize, b: Option<usize> },
    Add { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    Relu { x: usize },
    Softmax { x: usize, axis: usize },
    Reshape { x: usize },
    Permute { x: usize, perm: Vec<usize> },
    AvgPool2 { x: usize },
    Unfold { x: usize, k: usize },
    LocalAttn(Box<LocalAttn>),
    Upsample2 { x: usize },
    MeanSpatial { x: usize },
    Sum { x: usize },
    Mean { x: usize },
    SelectRow { x: usize, row: usize },
    WeightedSum { w: usize, xs: Vec<usize> },
    L1 { pred: usize, target: usize, weights: Option<Vec<f64>> },
    CrossEntropy { logits: usize, labels: Vec<usize>, smoothing: f64 },
}

/// Saved state of a fused windowed attention node.
#[derive(Debug, Clone)]
pub(crate) struct LocalAttn {
    pub q: usize,
    pub k: usize,
    pub v: usize,
    pub rel: Option<usize>,
    pub window: usize,
    pub heads: usize,
    /// Softmax weights, `[B·H·W·heads, window²]`.
    pub attn: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push(&self, mut value: Tensor, op: Op, inputs: &[usize]) -> Var<'_> {
        value.round_to_precision();
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Reverse traversal from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(loss.tape, self), "loss belongs to another tape");
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        if root.requires_grad {
            grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            ops::backward_rule(&nodes, id, &g, &mut grads);
        }
        // only leaves keep their gradient
        for (id, g) in grads.iter_mut().enumerate() {
            if !matches!(nodes[id].op, Op::Leaf) || !nodes[id].requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gradients of the loss with respect to every trainable leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf; `None` when the leaf is untracked or did not
    /// influence the loss.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but yields zeros of the leaf's shape when absent.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Value of a one-element variable.
    pub fn item(&self) -> f64 {
        self.value().item()
    }
}
