//! Tape-free reverse-mode autodiff. Every [`Var`] that requires a gradient
//! keeps its parents and a backward closure; [`Var::backward`] walks the
//! graph in reverse creation order.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let v = c.get();
        c.set(v + 1);
        v
    })
}

/// Receives the output gradient and a mask of which parents need a gradient.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    id: u64,
    value: Tensor<T>,
    grad: RefCell<Option<Tensor<T>>>,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// A tensor participating in automatic differentiation.
pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.0.id, self.0.value)
    }
}

impl<T: Scalar> Var<T> {
    /// A constant: gradients never flow into it.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::leaf(value, false)
    }

    pub fn leaf(value: Tensor<T>, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            grad: RefCell::new(None),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        }))
    }

    /// Builds the result of an operation. The closure is dropped when no
    /// parent requires a gradient.
    pub(crate) fn from_op(value: Tensor<T>, parents: Vec<Var<T>>, backward: BackwardFn<T>) -> Self {
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        if !requires_grad {
            return Self::constant(value);
        }
        Var(Rc::new(Node {
            id: next_id(),
            value,
            grad: RefCell::new(None),
            parents,
            backward: Some(backward),
            requires_grad: true,
        }))
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    fn accumulate(&self, g: Tensor<T>) {
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => existing.add_assign(&g),
            None => *slot = Some(g),
        }
    }

    /// Back-propagates from this (scalar) value, seeding with `1`.
    pub fn backward(&self) {
        assert_eq!(self.value().numel(), 1, "backward() requires a scalar output");
        self.backward_with(Tensor::ones(self.shape().to_vec()));
    }

    /// Back-propagates with an explicit output gradient.
    pub fn backward_with(&self, seed: Tensor<T>) {
        assert_eq!(seed.shape(), self.shape(), "seed gradient shape mismatch");
        if !self.requires_grad() {
            return;
        }
        let mut order: Vec<Var<T>> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(v) = stack.pop() {
            if !v.requires_grad() || !seen.insert(v.0.id) {
                continue;
            }
            for p in &v.0.parents {
                stack.push(p.clone());
            }
            order.push(v);
        }
        // parents are always created before their children
        order.sort_unstable_by(|a, b| b.0.id.cmp(&a.0.id));
        self.accumulate(seed);
        for v in &order {
            let Some(bw) = v.0.backward.as_ref() else {
                continue;
            };
            let Some(g) = v.0.grad.borrow_mut().take() else {
                continue;
            };
            let mask: Vec<bool> = v.0.parents.iter().map(|p| p.requires_grad()).collect();
            let grads = bw(&g, &mask);
            debug_assert_eq!(grads.len(), v.0.parents.len());
            for ((p, gp), need) in v.0.parents.iter().zip(grads).zip(mask) {
                if let (Some(gp), true) = (gp, need) {
                    debug_assert_eq!(gp.shape(), p.shape(), "gradient shape mismatch");
                    p.accumulate(gp);
                }
            }
        }
    }
}
