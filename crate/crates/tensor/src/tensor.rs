//! The tensor handle and the reverse pass.
//!
//! Every tensor is a reference-counted node. Operations on tensors that
//! require gradients record a backward closure plus handles to their
//! inputs; the recorded graph reachable from a scalar loss is the tape.
//! [`Tensor::backward`] walks it in reverse topological order and then
//! drops every closure it visited, so a tape is consumed exactly once.

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{Result, TensorError};

/// Computes input gradients from the output gradient. `needs[i]` tells
/// the closure whether input `i` wants a gradient at all; entries for
/// inputs that do not may be left `None`.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[bool]) -> Vec<Option<Vec<f64>>>>;

struct GradFn {
    inputs: Vec<Tensor>,
    f: BackwardFn,
}

struct Node {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: Cell<bool>,
    grad_fn: RefCell<Option<GradFn>>,
}

/// Dense row-major `f64` array taking part in reverse-mode differentiation.
///
/// Cloning a `Tensor` clones the handle, not the storage.
#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

impl Tensor {
    fn from_parts(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Contract(format!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            )));
        }
        Ok(Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(requires_grad),
            grad_fn: RefCell::new(None),
        })))
    }

    /// A constant: never receives a gradient.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::from_parts(data, shape.to_vec(), false)
    }

    /// A trainable leaf.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Self::from_parts(data, shape.to_vec(), true)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(vec![0.0; n], shape.to_vec(), false).expect("consistent shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(vec![value; n], shape.to_vec(), false).expect("consistent shape")
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![value], vec![1], false).expect("consistent shape")
    }

    /// Builds an op result, recording `f` when any input needs a gradient.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        inputs: Vec<Tensor>,
        f: BackwardFn,
    ) -> Tensor {
        let requires_grad = inputs.iter().any(Tensor::requires_grad);
        let out = Self::from_parts(data, shape, requires_grad).expect("op produced consistent shape");
        if requires_grad {
            *out.0.grad_fn.borrow_mut() = Some(GradFn { inputs, f });
        }
        out
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.0.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            other => Err(TensorError::Config {
                op,
                msg: format!("expected a rank-2 tensor, got shape {other:?}"),
            }),
        }
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on a tensor of shape {:?}", self.shape());
        self.0.data.borrow()[0]
    }

    /// Overwrites the storage in place. Used by optimizers and checkpoint loading.
    pub fn set_data(&self, data: &[f64]) -> Result<()> {
        if data.len() != self.numel() {
            return Err(TensorError::Contract(format!(
                "set_data: {} values for shape {:?}",
                data.len(),
                self.shape()
            )));
        }
        self.0.data.borrow_mut().copy_from_slice(data);
        Ok(())
    }

    pub(crate) fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.0.data.borrow_mut());
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    pub fn set_requires_grad(&self, on: bool) {
        self.0.requires_grad.set(on);
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub(crate) fn scale_grad(&self, c: f64) {
        if let Some(g) = self.0.grad.borrow_mut().as_mut() {
            g.iter_mut().for_each(|v| *v *= c);
        }
    }

    /// A constant copy sharing no graph history.
    pub fn detach(&self) -> Tensor {
        Self::from_parts(self.to_vec(), self.0.shape.clone(), false).expect("same shape")
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn has_grad_fn(&self) -> bool {
        self.0.grad_fn.borrow().is_some()
    }

    fn accumulate(&self, g: &[f64]) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Back-propagates from this scalar into every tensor on its tape that
    /// requires a gradient. Leaf gradients accumulate across calls until
    /// cleared; the tape itself is released afterwards.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(TensorError::Contract(
                "backward() on a tensor that does not require gradients".into(),
            ));
        }
        let order = self.topo_order();
        for t in &order {
            if t.has_grad_fn() {
                t.zero_grad();
            }
        }
        self.accumulate(&[1.0]);
        for t in order.iter().rev() {
            let grad_fn = t.0.grad_fn.borrow_mut().take();
            let Some(GradFn { inputs, f }) = grad_fn else {
                continue;
            };
            let Some(g) = t.grad() else { continue };
            let needs: Vec<bool> = inputs.iter().map(Tensor::requires_grad).collect();
            for (input, ig) in inputs.iter().zip(f(&g, &needs)) {
                if let Some(ig) = ig {
                    if input.requires_grad() {
                        input.accumulate(&ig);
                    }
                }
            }
        }
        Ok(())
    }

    /// Nodes reachable from `self` through recorded ops, inputs first.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Node> = HashSet::new();
        // (node, children already pushed)
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(Rc::as_ptr(&t.0)) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = t.0.grad_fn.borrow().as_ref() {
                for input in &gf.inputs {
                    if input.requires_grad() && !seen.contains(&Rc::as_ptr(&input.0)) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}
