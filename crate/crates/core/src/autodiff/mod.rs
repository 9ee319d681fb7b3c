//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is the tape: every operation appends a node holding its output
//! value and, when any input requires a gradient, a closure mapping the
//! upstream gradient to input gradients. Nodes are only ever appended, so
//! node ids are a topological order and backward is a single reverse sweep.

mod conv;
pub mod gradcheck;
mod linalg;
mod ops;
mod reduce;
mod structural;

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::tensor::{Result, Scalar, Tensor, TensorError};

pub use conv::Conv2dOptions;
pub use reduce::ReduceKind;

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

pub struct Graph<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar = f32> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by one backward sweep, indexed by node.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of its shape when it did not influence the loss.
    pub fn get_or_zeros(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape()))
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            value: Rc::new(value),
            requires_grad: false,
            parents: Vec::new(),
            backward: None,
        })
    }

    /// Leaf whose gradient is tracked.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(Node {
            value: Rc::new(value),
            requires_grad: true,
            parents: Vec::new(),
            backward: None,
        })
    }

    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.constant(Tensor::scalar(value))
    }

    /// Record an operation. The backward closure is kept only when some
    /// input requires a gradient; it must return one entry per input.
    pub fn record<'g>(
        &'g self,
        value: Tensor<T>,
        inputs: &[Var<'g, T>],
        backward: impl Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'g, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        #[cfg(debug_assertions)]
        {
            let inputs_finite = {
                let nodes = self.nodes.borrow();
                inputs.iter().all(|v| nodes[v.id].value.all_finite())
            };
            debug_assert!(
                !inputs_finite || value.all_finite(),
                "non-finite forward value from finite inputs"
            );
        }
        self.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents: inputs.iter().map(|v| v.id).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
        })
    }

    /// Reverse sweep from a scalar loss. Consumes the tape: a second call
    /// fails with [`TensorError::TapeConsumed`].
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if self.consumed.get() {
            return Err(TensorError::TapeConsumed);
        }
        let grads = self.sweep(loss)?;
        self.consumed.set(true);
        for node in self.nodes.borrow_mut().iter_mut() {
            node.backward = None;
        }
        Ok(grads)
    }

    /// Reverse sweep that leaves the tape intact for further sweeps.
    pub fn backward_retained(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if self.consumed.get() {
            return Err(TensorError::TapeConsumed);
        }
        self.sweep(loss)
    }

    fn sweep(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.id].value.shape().to_vec();
        if nodes[loss.id].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::ones(&shape));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            if let Some(backward) = &node.backward {
                let input_grads = backward(&upstream);
                debug_assert_eq!(input_grads.len(), node.parents.len());
                for (&p, g) in node.parents.iter().zip(input_grads) {
                    let Some(g) = g else { continue };
                    if !nodes[p].requires_grad {
                        continue;
                    }
                    debug_assert_eq!(g.shape(), nodes[p].value.shape());
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
            }
            if node.requires_grad && node.backward.is_none() {
                // leaf: keep its gradient
                grads[id] = Some(upstream);
            }
        }
        Ok(Gradients { grads })
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> T {
        self.value().data()[0]
    }

    /// Same value, cut off from the gradient flow.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.constant((*self.value()).clone())
    }
}
