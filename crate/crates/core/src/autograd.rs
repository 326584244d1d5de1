//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]. Node ids are
//! assigned in creation order, so walking the tape backwards is a valid
//! reverse topological order and no explicit sort is needed.

use std::cell::{Cell, Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Maps the gradient of a node's output to gradients of its parents, in
/// parent order. `None` means "no contribution".
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    op: &'static str,
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// Records a computation for later differentiation.
///
/// A tape is confined to one thread. After [`Tape::backward`] the recorded
/// graph can only be differentiated again after [`Tape::reset`].
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Tensor<T>>>>,
    consumed: Cell<bool>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}", self.id)
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    /// Adds an input. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(Node {
            op: "leaf",
            value: Rc::new(value),
            parents: Vec::new(),
            requires_grad,
            backward: None,
        })
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    /// Records an operation. The backward closure is dropped when no parent
    /// needs a gradient.
    pub fn record<F>(&self, op: &'static str, value: Tensor<T>, parents: &[Var<'_, T>], backward: F) -> Var<'_, T>
    where
        F: Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
    {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        self.push(Node {
            op,
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn<T>),
        })
    }

    fn push(&self, node: Node<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Names of all recorded operations, leaves excluded, in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes
            .borrow()
            .iter()
            .filter(|n| n.op != "leaf")
            .map(|n| n.op)
            .collect()
    }

    /// Differentiates a scalar loss with respect to every leaf that requires
    /// gradients.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let value = loss.value();
        if value.len() != 1 {
            return Err(Error::Autograd(format!(
                "backward needs a scalar loss, got shape {:?}",
                value.shape()
            )));
        }
        self.backward_with_seed(loss, Tensor::full(value.shape(), T::one()))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `output`)
    /// back to the leaves.
    pub fn backward_with_seed(&self, output: Var<'_, T>, seed: Tensor<T>) -> Result<()> {
        if self.consumed.get() {
            return Err(Error::Autograd(
                "graph already differentiated; call reset() first".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        if seed.shape() != nodes[output.id].value.shape() {
            return Err(Error::shape(
                "backward",
                "seed",
                nodes[output.id].value.shape(),
                seed.shape(),
            ));
        }
        let mut grads = self.grads.borrow_mut();
        grads.clear();
        grads.resize_with(nodes.len(), || None);
        grads[output.id] = Some(seed);

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let parent_grads = backward(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "{}", node.op);
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[pid].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), nodes[pid].value.shape(), "{} grad", node.op);
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        self.consumed.set(true);
        Ok(())
    }

    /// Gradient accumulated at a leaf by the last backward pass.
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.borrow().get(var.id).and_then(|g| g.clone())
    }

    /// Clears gradients so the recorded graph can be differentiated again.
    pub fn reset(&self) {
        self.grads.borrow_mut().clear();
        self.consumed.set(false);
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    /// Borrow of the value without bumping the reference count. Must not be
    /// held across a call that records on the tape.
    pub fn value_ref(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &*n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value_ref().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(*self)
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Var<'t, T> {
        let v = self.value();
        self.tape.constant((*v).clone())
    }

    /// Identity in the forward pass; multiplies the incoming gradient by
    /// `scale` in the backward pass.
    pub fn with_grad_scale(&self, scale: f64) -> Var<'t, T> {
        let s = T::of(scale);
        let v = (*self.value()).clone();
        self.tape
            .record("grad_scale", v, &[*self], move |g| vec![Some(g.map(|x| x * s))])
    }
}
