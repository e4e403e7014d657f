use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::Tensor;
use crate::error::{Error, Result};

/// Maps the gradient of an op's output to gradients of its parents, in
/// parent order. `None` means "no contribution".
pub type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Records differentiable operations in execution order.
///
/// Nodes whose parents are all constants are stored without a backward
/// closure, so frozen sub-graphs cost nothing at backward time. A tape is
/// single-threaded; independent tapes may live on different threads.
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

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var").field("id", &self.id).finish()
    }
}

/// Gradients of leaf variables after a backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }

    /// Number of leaves that received a gradient.
    pub fn count(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    /// Gradient of `var`, or zeros of `shape` when it did not reach the loss.
    pub fn get_or_zeros(&self, var: Var<'_>, shape: &[usize]) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
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
        self.nodes.borrow().is_empty()
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(Node { value: Rc::new(value), requires_grad, parents: Vec::new(), backward: None })
    }

    /// Trainable leaf holding a copy of `value`.
    pub fn param(&self, value: &Tensor) -> Var<'_> {
        self.leaf(value.clone(), true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn constant_shared(&self, value: Rc<Tensor>) -> Var<'_> {
        self.push(Node { value, requires_grad: false, parents: Vec::new(), backward: None })
    }

    /// Records an op. `backward` is dropped unless some parent requires a
    /// gradient.
    pub fn op<'t, F>(&'t self, value: Tensor, parents: &[Var<'t>], backward: F) -> Var<'t>
    where
        F: Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    {
        debug_assert!(parents.iter().all(|p| std::ptr::eq(p.tape, self)));
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let backward: Option<BackwardFn> = if requires_grad { Some(Box::new(backward)) } else { None };
        self.push(Node { value: Rc::new(value), requires_grad, parents: parents.iter().map(|p| p.id).collect(), backward })
    }

    /// Reverse sweep from a scalar `loss`. Populates gradients of every
    /// trainable leaf reachable from it and clears the tape; any `Var`
    /// recorded before this call must not be used to read values afterwards.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::contract("loss was recorded on a different tape"));
        }
        let mut nodes = self.nodes.borrow_mut();
        let seed = &nodes[loss.id].value;
        if seed.len() != 1 {
            return Err(Error::contract(format!("backward needs a scalar loss, got shape {:?}", seed.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::ones(seed.shape().to_vec()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            let Some(g) = grads[id].take() else { continue };
            let parent_grads = backward(&g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&pid, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[pid].requires_grad {
                    continue;
                }
                match grads[pid].as_mut() {
                    Some(acc) => acc.axpy(1.0, &pg)?,
                    None => grads[pid] = Some(pg),
                }
            }
        }
        // Only leaves keep their gradients.
        for (id, node) in nodes.iter().enumerate() {
            if node.backward.is_some() || !node.requires_grad {
                grads[id] = None;
            }
        }
        nodes.clear();
        Ok(Gradients { grads })
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }
}
