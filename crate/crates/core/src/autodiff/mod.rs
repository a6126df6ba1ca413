//! Define-by-run reverse-mode automatic differentiation with
//! forward-mode directional derivatives.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Reverse
//! sweeps ([`Tape::backward`], [`Tape::grad_graph`]) and forward sweeps
//! ([`Tape::jvp`]) are themselves expressed as tape operations, so their
//! results can be differentiated again: second-order MAML meta-gradients
//! and the gradient of a flow's Jacobian trace both rely on this.
//!
//! Ops whose adjoints are computed by dedicated kernels (convolution,
//! pooling, batch normalization) support a single reverse sweep only. A
//! second sweep that reaches one of their adjoint nodes fails loudly
//! instead of silently returning zero.
//!
//! ```
//! use bhmaml::autodiff::Tape;
//! use bhmaml::tensor::Tensor;
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::scalar(3.0));
//! let y = x.mul(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).item(), 6.0);
//! ```

mod check;
mod ops;

pub use ops::NormMode;

use std::cell::RefCell;
use std::sync::Arc;

pub use check::{finite_difference_gradient, grad_check, jvp, max_relative_error};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone)]
pub(crate) enum Op<S> {
    Leaf,
    /// Adjoint produced by a kernel; not differentiable again.
    Frozen(&'static str, Vec<usize>),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, S),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    Softplus(usize),
    Sqrt(usize),
    Sum(usize),
    SumRows(usize),
    SumCols(usize),
    BroadcastRows(usize),
    BroadcastCols(usize),
    BroadcastScalar(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize, usize),
    GatherRows(usize, Arc<Vec<usize>>),
    ScatterRows(usize, Arc<Vec<usize>>),
    LogSoftmax(usize),
    Pick(usize, Arc<Vec<usize>>),
    Conv2d(usize, usize, usize),
    MaxPool2(usize, Arc<Vec<usize>>),
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor<S>,
        inv_std: Arc<Vec<S>>,
        train: bool,
    },
}

impl<S> Op<S> {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Frozen(_, p) | ConcatCols(p) | ConcatRows(p) => p.clone(),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => vec![*a, *b],
            Conv2d(x, w, b) => vec![*x, *w, *b],
            BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Neg(a) | Scale(a, _) | AddScalar(a) | Transpose(a) | Reshape(a) | Tanh(a) | Relu(a)
            | Exp(a) | Log(a) | Sigmoid(a) | Softplus(a) | Sqrt(a) | Sum(a) | SumRows(a)
            | SumCols(a) | BroadcastRows(a) | BroadcastCols(a) | BroadcastScalar(a)
            | SliceCols(a, _, _) | GatherRows(a, _) | ScatterRows(a, _) | LogSoftmax(a)
            | Pick(a, _) | MaxPool2(a, _) => vec![*a],
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
    is_param: bool,
}

/// Append-only record of a computation. Node handles are indices, so
/// parents always precede children.
pub struct Tape<S> {
    nodes: RefCell<Vec<Node<S>>>,
}

/// Handle to a tape node. `Copy`, and only valid for the tape it came from.
#[derive(Clone, Copy)]
pub struct Var<'t, S> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S> std::fmt::Debug for Var<'_, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

/// Gradients of a scalar loss with respect to every parameter leaf.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    by_id: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for `var`; parameters the loss does not reach get zeros.
    pub fn get(&self, var: Var<'_, S>) -> Tensor<S> {
        match self.by_id.get(var.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.shape()),
        }
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(1024)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&self, value: Tensor<S>) -> Var<'_, S> {
        self.leaf(value, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor<S>, is_param: bool) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: is_param,
            is_param,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push(&self, value: Tensor<S>, op: Op<S>) -> Var<'_, S> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = op.parents().iter().any(|&p| nodes[p].needs_grad);
        nodes.push(Node {
            value,
            op,
            needs_grad,
            is_param: false,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn var(&self, id: usize) -> Var<'_, S> {
        Var { tape: self, id }
    }

    fn value_of(&self, id: usize) -> Tensor<S> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Reverse sweep from `loss`, recorded on the tape. Returns the adjoint
    /// of every node up to `loss`.
    fn backprop(&self, loss: Var<'_, S>) -> Result<Vec<Option<usize>>> {
        if loss.value().len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let mut grads: Vec<Option<usize>> = vec![None; loss.id + 1];
        if !self.needs_grad(loss.id) {
            return Ok(grads);
        }
        grads[loss.id] = Some(self.constant(Tensor::ones(loss.shape())).id);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id] else { continue };
            let (op, needs) = {
                let nodes = self.nodes.borrow();
                (nodes[id].op.clone(), nodes[id].needs_grad)
            };
            if !needs {
                continue;
            }
            let contributions = ops::vjp(self, id, &op, self.var(g))?;
            for (parent, contribution) in contributions {
                if !self.needs_grad(parent) {
                    continue;
                }
                grads[parent] = Some(match grads[parent] {
                    None => contribution.id,
                    Some(prev) => self.var(prev).add(contribution)?.id,
                });
            }
        }
        Ok(grads)
    }

    /// Gradients of a scalar `loss` for every parameter leaf. The adjoint
    /// nodes are discarded afterwards.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Gradients<S>> {
        let mark = self.len();
        let result = self.backprop(loss).map(|grads| {
            let nodes = self.nodes.borrow();
            let by_id = grads
                .iter()
                .enumerate()
                .map(|(id, g)| match g {
                    Some(g) if nodes[id].is_param => Some(nodes[*g].value.clone()),
                    _ => None,
                })
                .collect();
            Gradients { by_id }
        });
        self.nodes.borrow_mut().truncate(mark);
        result
    }

    /// Gradient values of `loss` with respect to `wrt`, in order.
    pub fn grad(&self, loss: Var<'_, S>, wrt: &[Var<'_, S>]) -> Result<Vec<Tensor<S>>> {
        let mark = self.len();
        let result = self.backprop(loss).map(|grads| {
            wrt.iter()
                .map(|v| match grads.get(v.id).copied().flatten() {
                    Some(g) => self.value_of(g),
                    None => Tensor::zeros(v.shape()),
                })
                .collect()
        });
        self.nodes.borrow_mut().truncate(mark);
        result
    }

    /// Gradients of `loss` as tape nodes, differentiable again.
    pub fn grad_graph<'t>(&'t self, loss: Var<'t, S>, wrt: &[Var<'t, S>]) -> Result<Vec<Var<'t, S>>> {
        let grads = self.backprop(loss)?;
        Ok(wrt
            .iter()
            .map(|v| match grads.get(v.id).copied().flatten() {
                Some(g) => self.var(g),
                None => self.constant(Tensor::zeros(v.shape())),
            })
            .collect())
    }

    /// Directional derivative of `output` along `tangent` at `input`,
    /// recorded on the tape so that it can be differentiated further.
    pub fn jvp<'t>(&'t self, output: Var<'t, S>, input: Var<'t, S>, tangent: Var<'t, S>) -> Result<Var<'t, S>> {
        if input.shape() != tangent.shape() {
            return Err(Error::dim("jvp", &input.shape(), &tangent.shape()));
        }
        if output.id < input.id {
            return Ok(self.constant(Tensor::zeros(output.shape())));
        }
        let base = input.id;
        let mut tangents: Vec<Option<usize>> = vec![None; output.id - base + 1];
        tangents[0] = Some(tangent.id);
        for id in base + 1..=output.id {
            let op = self.nodes.borrow()[id].op.clone();
            let parents = op.parents();
            if !parents
                .iter()
                .any(|&p| p >= base && tangents[p - base].is_some())
            {
                continue;
            }
            let lookup = |p: usize| -> Option<Var<'t, S>> {
                if p >= base {
                    tangents[p - base].map(|t| self.var(t))
                } else {
                    None
                }
            };
            let t = ops::jvp_rule(self, id, &op, &lookup)?;
            tangents[id - base] = Some(t.id);
        }
        Ok(match tangents[output.id - base] {
            Some(t) => self.var(t),
            None => self.constant(Tensor::zeros(output.shape())),
        })
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor<S> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Value of a single-element node.
    pub fn item(&self) -> S {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.needs_grad(self.id)
    }

    /// Constant leaf with the same value; gradients stop here.
    pub fn detach(&self) -> Var<'t, S> {
        self.tape.constant(self.value())
    }
}

#[cfg(test)]
mod tests;
