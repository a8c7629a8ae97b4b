//! Reverse-mode tape.
//!
//! Nodes are appended in evaluation order, so node ids already form a
//! topological order of the graph and the backward sweep walks them in
//! reverse. A tape belongs to one forward/backward pass on one thread.

use std::cell::RefCell;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Maps the upstream gradient to one gradient per parent. `needs[i]` is
/// false when parent `i` does not require a gradient, in which case the
/// rule may return `None` for it.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Element> {
    value: Tensor<T>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T: Element = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Tensor<T>>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Element = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), grads: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(&self, node: Node<T>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        self.grads.borrow_mut().push(None);
        nodes.len() - 1
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        let id = self.push_node(Node { value, requires_grad: true, parents: Vec::new(), backward: None });
        Var { tape: self, id }
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        let id = self.push_node(Node { value, requires_grad: false, parents: Vec::new(), backward: None });
        Var { tape: self, id }
    }

    /// Records the result of an operation. The backward rule is dropped when
    /// no parent requires a gradient.
    pub(crate) fn op<'t>(&'t self, value: Tensor<T>, parents: &[Var<'t, T>], backward: BackwardFn<T>) -> Var<'t, T> {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let id = self.push_node(Node {
            value,
            requires_grad,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then_some(backward),
        });
        Var { tape: self, id }
    }

    /// Gradient of the last `backward` calls with respect to `var`, summed
    /// over calls. `None` if nothing has flowed into it.
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.borrow()[var.id].clone()
    }

    pub fn zero_grads(&self) {
        for g in self.grads.borrow_mut().iter_mut() {
            *g = None;
        }
    }

    /// Propagates d`loss`/d(node) to every node that requires a gradient.
    /// Gradients accumulate across repeated calls.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let seed = {
            let nodes = self.nodes.borrow();
            let value = &nodes[loss.id].value;
            if value.numel() != 1 {
                return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", value.shape())));
            }
            Tensor::from_parts(value.shape().to_vec(), vec![T::one()])
        };
        let nodes = self.nodes.borrow();
        let mut pass: Vec<Option<Tensor<T>>> = vec![None; loss.id + 1];
        pass[loss.id] = Some(seed);
        for id in (0..=loss.id).rev() {
            let Some(g) = pass[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Some(rule) = &node.backward {
                let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
                let parent_grads = rule(&g, &needs);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for ((&pid, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                    let Some(pg) = pg else { continue };
                    if !need {
                        continue;
                    }
                    debug_assert_eq!(pg.shape(), nodes[pid].value.shape(), "gradient shape of node {pid}");
                    match &mut pass[pid] {
                        Some(acc) => acc.add_assign(&pg)?,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            let mut grads = self.grads.borrow_mut();
            match &mut grads[id] {
                Some(acc) => acc.add_assign(&g)?,
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor<T> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.tape.grad(*self)
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(*self)
    }
}

impl<T: Element> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}
