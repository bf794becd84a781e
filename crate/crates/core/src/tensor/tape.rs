//! Reverse-mode differentiation tape.
//!
//! Every op appends a node holding its forward value and, when any input
//! requires a gradient, a closure mapping the output gradient to one gradient
//! per parent. `Tape::backward` walks the nodes in reverse insertion order,
//! which is a valid topological order because nodes only reference earlier
//! nodes.

use std::cell::RefCell;
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Tensor>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    param: Option<String>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    pub(crate) id: usize,
}

/// A recorded computation. One tape per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { id: nodes.len() - 1 }
    }

    fn leaf(&self, value: Tensor, requires_grad: bool, param: Option<String>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents: Vec::new(),
            backward: None,
            param,
        }))
    }

    /// A leaf whose gradient is tracked.
    pub fn var(&self, value: Tensor) -> Result<Var> {
        self.leaf(value, true, None)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Result<Var> {
        self.leaf(value, false, None)
    }

    /// A tracked leaf bound to a named parameter, so its gradient can be
    /// routed back to the parameter registry after `backward`.
    pub fn param(&self, name: &str, value: Tensor) -> Result<Var> {
        self.leaf(value, true, Some(name.to_string()))
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.id].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.id].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records the result of an op. `backward` receives the gradient of the
    /// output and must return one gradient per entry in `parents`, in order.
    pub(crate) fn record<F>(
        &self,
        op: &'static str,
        value: Tensor,
        parents: &[Var],
        backward: F,
    ) -> Result<Var>
    where
        F: Fn(&Tensor) -> Vec<Tensor> + 'static,
    {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        Ok(self.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: if requires_grad {
                Some(Box::new(backward))
            } else {
                None
            },
            param: None,
        }))
    }

    /// Propagates gradients from a single-element `loss` back to every
    /// tracked leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", root.value.shape()),
            ));
        }
        if !root.requires_grad {
            return Err(Error::NoProvenance);
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::ones(root.value.shape()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parent_grads = backward(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if !nodes[p].requires_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            // Keep gradients of leaves and anything the caller may inspect.
            grads[id] = Some(g);
        }

        let params = nodes[..=loss.id]
            .iter()
            .enumerate()
            .filter_map(|(id, n)| n.param.clone().map(|name| (name, id)))
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Gradients of a scalar with respect to every node recorded before it.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(String, usize)>,
}

impl Gradients {
    /// Gradient of `v`, or `None` if `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// `(parameter name, gradient)` for every parameter leaf on the tape.
    /// Parameters unreachable from the loss are omitted.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(name, id)| self.grads[*id].as_ref().map(|g| (name.as_str(), g)))
    }
}
