//! Reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records every operation as a node holding its output value, its
//! parent nodes and a closure mapping the output gradient to parent gradients.
//! [`Tape::backward`] walks the nodes in reverse creation order, which is a
//! valid topological order because parents always precede children.

mod conv;
mod norm;
mod ops;

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};
use std::collections::HashMap;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Everything a backward closure can look at.
pub struct BackwardArgs<'a, T> {
    pub grad: &'a ArrayD<T>,
    pub inputs: Vec<&'a ArrayD<T>>,
    pub output: &'a ArrayD<T>,
    pub needs: Vec<bool>,
}

type BackwardFn<T> = Box<dyn Fn(&BackwardArgs<'_, T>) -> Vec<Option<ArrayD<T>>>>;

struct Node<T> {
    value: ArrayD<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Recording context for one forward (and optional backward) pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

/// Gradients produced by [`Tape::backward`], keyed by parameter.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub by_param: HashMap<ParamId, ArrayD<T>>,
}

impl<T> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&ArrayD<T>> {
        self.by_param.get(&id)
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// Tape that records backward closures.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Tape for inference: values only, no backward bookkeeping.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: ArrayD<T>) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient (when the tape records them).
    pub fn variable(&mut self, value: ArrayD<T>) -> Var {
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter. Buffers and frozen entries come in as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let entry = store.entry(id);
        let requires_grad = self.grad_enabled && entry.is_trainable();
        self.nodes.push(Node {
            value: entry.value.clone(),
            parents: Vec::new(),
            backward: None,
            requires_grad,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// First element of a node's value; intended for scalar losses.
    pub fn scalar(&self, v: Var) -> T {
        *self.nodes[v.0]
            .value
            .iter()
            .next()
            .expect("scalar node is non-empty")
    }

    pub(crate) fn push<F>(&mut self, value: ArrayD<T>, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&BackwardArgs<'_, T>) -> Vec<Option<ArrayD<T>>> + 'static,
    {
        let requires_grad =
            self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let node = if requires_grad {
            Node {
                value,
                parents: parents.iter().map(|p| p.0).collect(),
                backward: Some(Box::new(backward)),
                requires_grad: true,
                param: None,
            }
        } else {
            Node {
                value,
                parents: Vec::new(),
                backward: None,
                requires_grad: false,
                param: None,
            }
        };
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    fn run_backward(
        &self,
        loss: Var,
        keep: &[Var],
    ) -> (Vec<Option<ArrayD<T>>>, HashMap<ParamId, ArrayD<T>>) {
        let mut grads: Vec<Option<ArrayD<T>>> = (0..=loss.0).map(|_| None).collect();
        let mut by_param = HashMap::new();
        let mut kept: Vec<Option<ArrayD<T>>> = vec![None; keep.len()];
        if !self.nodes[loss.0].requires_grad {
            return (kept, by_param);
        }
        grads[loss.0] = Some(ArrayD::from_elem(
            self.nodes[loss.0].value.raw_dim(),
            T::one(),
        ));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            for (k, kv) in keep.iter().enumerate() {
                if kv.0 == i {
                    kept[k] = Some(g.clone());
                }
            }
            if let Some(pid) = node.param {
                match by_param.get_mut(&pid) {
                    Some(acc) => *acc += &g,
                    None => {
                        by_param.insert(pid, g.clone());
                    }
                }
            }
            let Some(bw) = &node.backward else { continue };
            let args = BackwardArgs {
                grad: &g,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                output: &node.value,
                needs: node
                    .parents
                    .iter()
                    .map(|&p| self.nodes[p].requires_grad)
                    .collect(),
            };
            let parent_grads = bw(&args);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    pg.shape(),
                    self.nodes[p].value.shape(),
                    "grad shape for node {p}"
                );
                match &mut grads[p] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        (kept, by_param)
    }

    /// Backpropagate from a scalar loss; returns gradients of every trainable parameter reached.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let (_, by_param) = self.run_backward(loss, &[]);
        Gradients { by_param }
    }

    /// Backpropagate and additionally return gradients for the requested nodes.
    pub fn backward_with(&self, loss: Var, wrt: &[Var]) -> (Gradients<T>, Vec<Option<ArrayD<T>>>) {
        let (kept, by_param) = self.run_backward(loss, wrt);
        (Gradients { by_param }, kept)
    }
}

/// Sum `grad` down to `shape`, undoing numpy-style broadcasting.
pub(crate) fn unbroadcast<T: Scalar>(grad: ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    if grad.shape() == shape {
        return grad;
    }
    let mut g = grad;
    while g.ndim() > shape.len() {
        g = g.sum_axis(ndarray::Axis(0));
    }
    for (axis, &dim) in shape.iter().enumerate() {
        if dim == 1 && g.shape()[axis] != 1 {
            g = g
                .sum_axis(ndarray::Axis(axis))
                .insert_axis(ndarray::Axis(axis));
        }
    }
    g.into_shape_with_order(IxDyn(shape))
        .expect("unbroadcast shape")
}
