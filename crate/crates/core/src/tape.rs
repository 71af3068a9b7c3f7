//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every value computed during a forward pass. Nodes are
//! appended in evaluation order, so reverse index order is a topological
//! order of the graph and each node is visited exactly once on replay.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded operation plus whatever forward context its backward rule needs.
pub(crate) enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, padding: usize },
    ConvTranspose2d { input: Var, weight: Var, bias: Option<Var> },
    MaxPool2d { input: Var, argmax: Vec<u32> },
    BatchNorm2d { input: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Relu { input: Var },
    Sigmoid { input: Var },
    Concat { a: Var, b: Var },
    Mean { input: Var },
    BceWithLogits { logits: Var, targets: Tensor<T>, mask: Option<Tensor<T>>, count: usize },
    NonLocal { input: Var },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    consumed: bool,
    check_finite: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), consumed: false, check_finite: false }
    }

    /// When enabled, every operation fails with [`Error::NonFinite`] if its output
    /// contains NaN or infinity.
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    pub(crate) fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if self.consumed {
            return Err(Error::Tape("cannot record on a tape after backward".into()));
        }
        if self.check_finite {
            if let Some(index) = value.first_non_finite() {
                return Err(Error::NonFinite { op: name, index });
            }
        }
        let requires_grad = op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, requires_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Backpropagates from a scalar `loss`, filling gradients of every
    /// `requires_grad` leaf reachable from it. Gradients of a value used in
    /// several places accumulate. The tape can be replayed only once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Tape("backward called twice on the same tape".into()));
        }
        let loss_value = &self.nodes[loss.0].value;
        if !loss_value.is_scalar() {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Tape("loss does not depend on any tracked tensor".into()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_fn(loss_value.shape(), |_| T::one()));

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                grads[i] = Some(gout);
                continue;
            }
            for (input, g) in self.input_grads(&node.op, &node.value, &gout) {
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn input_grads(&self, op: &Op<T>, out: &Tensor<T>, gout: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut res = Vec::new();
        match op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, padding } => {
                let g = ops::conv::conv2d_backward(
                    val(*input),
                    val(*weight),
                    *padding,
                    gout,
                    self.needs(*input),
                    self.needs(*weight),
                );
                push_opt(&mut res, *input, g.input);
                push_opt(&mut res, *weight, g.weight);
                if let Some(b) = bias.filter(|b| self.needs(*b)) {
                    res.push((b, ops::conv::bias_grad(gout)));
                }
            }
            Op::ConvTranspose2d { input, weight, bias } => {
                let g = ops::conv::conv_transpose2d_backward(
                    val(*input),
                    val(*weight),
                    gout,
                    self.needs(*input),
                    self.needs(*weight),
                );
                push_opt(&mut res, *input, g.input);
                push_opt(&mut res, *weight, g.weight);
                if let Some(b) = bias.filter(|b| self.needs(*b)) {
                    res.push((b, ops::conv::bias_grad(gout)));
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if self.needs(*input) {
                    res.push((*input, ops::pool::maxpool2d_backward(val(*input).shape(), argmax, gout)));
                }
            }
            Op::BatchNorm2d { input, gamma, beta, xhat, inv_std, train } => {
                let g = ops::norm::batchnorm2d_backward(
                    val(*input).shape(),
                    val(*gamma),
                    xhat,
                    inv_std,
                    *train,
                    gout,
                );
                if self.needs(*input) {
                    res.push((*input, g.input));
                }
                if self.needs(*gamma) {
                    res.push((*gamma, g.gamma));
                }
                if self.needs(*beta) {
                    res.push((*beta, g.beta));
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    res.push((*a, gout.clone()));
                }
                if self.needs(*b) {
                    res.push((*b, ops::pointwise::reduce_to_shape(gout, val(*b).shape())));
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    res.push((*a, ops::pointwise::mul_broadcast(gout, val(*b))));
                }
                if self.needs(*b) {
                    let prod = ops::pointwise::mul_same(gout, val(*a));
                    res.push((*b, ops::pointwise::reduce_to_shape(&prod, val(*b).shape())));
                }
            }
            Op::Relu { input } => {
                if self.needs(*input) {
                    res.push((*input, ops::pointwise::relu_backward(val(*input), gout)));
                }
            }
            Op::Sigmoid { input } => {
                if self.needs(*input) {
                    res.push((*input, ops::pointwise::sigmoid_backward(out, gout)));
                }
            }
            Op::Concat { a, b } => {
                let ca = val(*a).shape()[1];
                let cb = val(*b).shape()[1];
                if self.needs(*a) {
                    res.push((*a, gout.slice_channels(0, ca).expect("concat grad shape")));
                }
                if self.needs(*b) {
                    res.push((*b, gout.slice_channels(ca, cb).expect("concat grad shape")));
                }
            }
            Op::Mean { input } => {
                if self.needs(*input) {
                    let x = val(*input);
                    let g = gout.item() / T::from_usize(x.len()).unwrap();
                    res.push((*input, Tensor::full(x.shape(), g)));
                }
            }
            Op::BceWithLogits { logits, targets, mask, count } => {
                if self.needs(*logits) {
                    res.push((
                        *logits,
                        ops::loss::bce_backward(val(*logits), targets, mask.as_ref(), *count, gout.item()),
                    ));
                }
            }
            Op::NonLocal { input } => {
                if self.needs(*input) {
                    res.push((*input, ops::nonlocal::nonlocal_backward(val(*input), gout)));
                }
            }
        }
        res
    }
}

fn push_opt<T>(res: &mut Vec<(Var, Tensor<T>)>, v: Var, g: Option<Tensor<T>>) {
    if let Some(g) = g {
        res.push((v, g));
    }
}

fn op_inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Conv2d { input, weight, bias, .. } | Op::ConvTranspose2d { input, weight, bias } => {
            let mut v = vec![*input, *weight];
            v.extend(bias.iter().copied());
            v
        }
        Op::BatchNorm2d { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
        Op::Add { a, b } | Op::Mul { a, b } | Op::Concat { a, b } => vec![*a, *b],
        Op::MaxPool2d { input, .. }
        | Op::Relu { input }
        | Op::Sigmoid { input }
        | Op::Mean { input }
        | Op::NonLocal { input } => vec![*input],
        Op::BceWithLogits { logits, .. } => vec![*logits],
    }
}
