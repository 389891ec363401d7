//! Dense `f64` tensors with tape-free reverse-mode differentiation.
//!
//! Each [`Tensor`] produced by an operation keeps a reference to its inputs
//! when any of them requires a gradient, so the graph is the web of `Rc`
//! links rooted at the loss. [`Tensor::backward`] walks it once in reverse
//! topological order and accumulates into the `grad` slot of every leaf that
//! requires one. Intermediate gradients are dropped as soon as they have been
//! propagated.

mod kernels;
mod ops;
mod optim;

use std::cell::{Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

pub use ops::{cross_entropy, dropout, layer_norm, masked_softmax, matmul};
pub use optim::{clip_grad_norm, global_grad_norm, sgd_step, Parameter};

use crate::error::{Error, Result};
use ops::Op;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: Option<Op>,
}

/// Reference-counted handle to a node in the differentiation graph.
///
/// Cloning is cheap and aliases the same node; parameters are shared this
/// way between a model and its optimizer.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Option<Op>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            requires_grad,
            grad: RefCell::new(None),
            op,
        }))
    }

    /// Constant tensor; gradients never flow into it.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        Ok(Tensor::build(shape.to_vec(), data, false, None))
    }

    /// Trainable leaf.
    pub fn leaf(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::new(shape, data)?;
        Ok(Tensor::build(t.0.shape.clone(), t.to_vec(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor::build(shape.to_vec(), vec![0.0; numel], false, None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::build(Vec::new(), vec![value], false, None)
    }

    /// Result of an operation. Fails if any output element is not finite.
    fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<Tensor> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.parents().iter().any(|p| p.requires_grad());
        Ok(Tensor::build(shape, data, requires_grad, requires_grad.then_some(op)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().clone()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::contract("item", format!("tensor has shape {:?}", self.shape())));
        }
        Ok(self.data()[0])
    }

    /// Overwrites the values of a leaf in place.
    ///
    /// Values of operation outputs are immutable; only leaves (parameters,
    /// inputs) may be rewritten, e.g. by an optimizer or a checkpoint load.
    pub fn data_mut(&self) -> Result<RefMut<'_, Vec<f64>>> {
        if !self.is_leaf() {
            return Err(Error::contract("data_mut", "only leaf tensors can be modified"));
        }
        Ok(self.0.data.borrow_mut())
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub(crate) fn grad_ref(&self) -> Ref<'_, Option<Vec<f64>>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub(crate) fn set_grad(&self, grad: Option<Vec<f64>>) {
        *self.0.grad.borrow_mut() = grad;
    }

    /// Back-propagates from a one-element tensor, accumulating `∂self/∂leaf`
    /// into every reachable leaf that requires a gradient.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape()),
            ));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topological_order();
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.0.id, vec![1.0]);
        for node in order.iter().rev() {
            let Some(grad) = grads.remove(&node.0.id) else {
                continue;
            };
            let Some(op) = &node.0.op else {
                let mut slot = node.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += g),
                    None => *slot = Some(grad),
                }
                continue;
            };
            let parents = op.parents();
            let needs: Vec<bool> = parents.iter().map(|p| p.requires_grad()).collect();
            let parent_grads = op.backward(node, &grad, &needs);
            for ((parent, pgrad), need) in parents.iter().zip(parent_grads).zip(needs) {
                let Some(pgrad) = pgrad.filter(|_| need) else {
                    continue;
                };
                match grads.get_mut(&parent.0.id) {
                    Some(acc) => acc.iter_mut().zip(&pgrad).for_each(|(a, g)| *a += g),
                    None => {
                        grads.insert(parent.0.id, pgrad);
                    }
                }
            }
        }
        Ok(())
    }

    /// Nodes requiring gradients, each after all of its inputs.
    fn topological_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !seen.insert(node.0.id) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(op) = &node.0.op {
                for parent in op.parents().into_iter().rev() {
                    if parent.requires_grad() && !seen.contains(&parent.0.id) {
                        stack.push((parent.clone(), false));
                    }
                }
            }
        }
        order
    }
}
