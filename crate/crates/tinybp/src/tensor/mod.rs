//! Reverse-mode autodiff on reference-counted tensors.
//!
//! A forward pass builds a DAG of `Rc<Tensor<T>>` nodes; each op node keeps
//! its parents alive and carries a closure that maps the output gradient to
//! parent gradients. `backward` walks the DAG once in reverse topological
//! order and then marks it consumed: a second call without a fresh forward
//! pass is an error, not silent double accumulation.
//!
//! The element type is generic so training runs in `f32` while gradient
//! checks run the same code in `f64`.

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};
use std::rc::Rc;

use crate::error::{Error, Result};

pub mod adam;
pub mod ops;

pub use adam::Adam;

/// Scalar element of a tensor. Implemented for `f32` and `f64`.
pub trait Element:
    Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn minimum(self, other: Self) -> Self;
    /// Round half to even, the crate-wide rounding rule for quantization.
    fn round_ties_even(self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_element {
    ($t:ty) => {
        impl Element for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn maximum(self, other: Self) -> Self {
                self.max(other)
            }
            fn minimum(self, other: Self) -> Self {
                self.min(other)
            }
            fn round_ties_even(self) -> Self {
                self.round_ties_even()
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
        }
    };
}

impl_element!(f32);
impl_element!(f64);

/// Shared handle to a tensor node.
pub type Value<T> = Rc<Tensor<T>>;

/// Maps the node's output gradient to one optional gradient per parent.
/// Parents are passed back in so closures do not have to capture data copies.
type BackwardFn<T> = Box<dyn Fn(&[Value<T>], &[T]) -> Vec<Option<Vec<T>>>>;

pub struct Tensor<T: Element> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    /// Leaf that accumulates gradients (trainable parameter or checked input).
    requires_grad: bool,
    /// True if this node or any ancestor requires grad; gates tape recording.
    needs_grad: bool,
    parents: Vec<Value<T>>,
    backward_fn: Option<BackwardFn<T>>,
    consumed: Cell<bool>,
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad)
            .field("needs_grad", &self.needs_grad)
            .field("parents", &self.parents.len())
            .finish()
    }
}

impl<T: Element> Drop for Tensor<T> {
    // Default Rc teardown recurses through `parents` and overflows the stack
    // on deep graphs, so unlink iteratively instead.
    fn drop(&mut self) {
        let mut stack = std::mem::take(&mut self.parents);
        while let Some(p) = stack.pop() {
            if let Some(mut inner) = Rc::into_inner(p) {
                stack.append(&mut inner.parents);
            }
        }
    }
}

impl<T: Element> Tensor<T> {
    /// Leaf node. `requires_grad` opts it into gradient accumulation.
    pub fn leaf(shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Value<T>> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "leaf data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        if len == 0 {
            return Err(Error::Shape(format!("empty tensor shape {shape:?}")));
        }
        Ok(Rc::new(Tensor {
            shape: shape.to_vec(),
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            needs_grad: requires_grad,
            parents: Vec::new(),
            backward_fn: None,
            consumed: Cell::new(false),
        }))
    }

    /// Non-trainable leaf.
    pub fn constant(shape: &[usize], data: Vec<T>) -> Result<Value<T>> {
        Self::leaf(shape, data, false)
    }

    pub fn scalar(v: T) -> Value<T> {
        Self::constant(&[1], vec![v]).expect("scalar is always valid")
    }

    /// Internal op-node constructor; `needs_grad` propagates from parents.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Value<T>>,
        backward_fn: BackwardFn<T>,
    ) -> Value<T> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let needs_grad = parents.iter().any(|p| p.needs_grad);
        Rc::new(Tensor {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: false,
            needs_grad,
            parents,
            backward_fn: if needs_grad { Some(backward_fn) } else { None },
            consumed: Cell::new(false),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn data(&self) -> std::cell::Ref<'_, Vec<T>> {
        self.data.borrow()
    }

    /// Overwrite leaf data in place (optimizer steps, finite-difference probes).
    pub fn set_data(&self, new: &[T]) {
        let mut d = self.data.borrow_mut();
        assert_eq!(d.len(), new.len(), "set_data length mismatch");
        d.copy_from_slice(new);
    }

    pub fn item(&self) -> T {
        assert_eq!(self.len(), 1, "item() requires a scalar tensor");
        self.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.grad.borrow_mut() = None;
    }

    fn accumulate_grad(&self, g: &[T]) {
        let mut slot = self.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }
}

/// Post-order DFS over `needs_grad` nodes, identity by `Rc` pointer.
fn topo_order<T: Element>(root: &Value<T>) -> Vec<Value<T>> {
    let mut order = Vec::new();
    let mut seen: HashSet<*const Tensor<T>> = HashSet::new();
    // Explicit stack; loss graphs from long training loops can be deep.
    let mut stack: Vec<(Value<T>, usize)> = vec![(root.clone(), 0)];
    seen.insert(Rc::as_ptr(root));
    while let Some((node, child)) = stack.pop() {
        let mut advanced = false;
        let mut idx = child;
        while idx < node.parents.len() {
            let p = node.parents[idx].clone();
            idx += 1;
            if p.needs_grad && seen.insert(Rc::as_ptr(&p)) {
                stack.push((node.clone(), idx));
                stack.push((p, 0));
                advanced = true;
                break;
            }
        }
        if !advanced {
            order.push(node);
        }
    }
    order
}

/// Run reverse-mode accumulation from a scalar root.
///
/// Gradients accumulate into every reachable leaf with `requires_grad`.
/// The visited subgraph is marked consumed; re-running `backward` on it
/// without a fresh forward pass returns an error. Non-finite gradients
/// anywhere abort with a numerical error.
pub fn backward<T: Element>(root: &Value<T>) -> Result<()> {
    if root.len() != 1 {
        return Err(Error::Autodiff(format!(
            "backward requires a scalar root, got shape {:?}",
            root.shape()
        )));
    }
    if !root.needs_grad {
        return Err(Error::Autodiff(
            "backward on a graph with no trainable inputs".into(),
        ));
    }
    if root.consumed.get() {
        return Err(Error::Autodiff(
            "tape already consumed; rerun the forward pass before calling backward again".into(),
        ));
    }

    let order = topo_order(root);
    for node in &order {
        node.consumed.set(true);
        if !node.requires_grad {
            node.zero_grad();
        }
    }
    root.accumulate_grad(&[T::ONE]);

    for node in order.iter().rev() {
        let Some(f) = node.backward_fn.as_ref() else {
            continue;
        };
        let g = node
            .grad
            .borrow()
            .clone()
            .expect("reverse topological order guarantees a gradient");
        let parent_grads = f(&node.parents, &g);
        debug_assert_eq!(parent_grads.len(), node.parents.len());
        for (parent, pg) in node.parents.iter().zip(parent_grads) {
            let Some(pg) = pg else { continue };
            if !parent.needs_grad {
                continue;
            }
            if pg.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(
                    "non-finite gradient produced during backward".into(),
                ));
            }
            parent.accumulate_grad(&pg);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ops;

    #[test]
    fn leaf_rejects_len_mismatch() {
        assert!(Tensor::<f32>::leaf(&[2, 3], vec![0.0; 5], false).is_err());
    }

    #[test]
    fn second_backward_without_forward_is_an_error() {
        let x = Tensor::<f32>::leaf(&[3], vec![1.0, 2.0, 3.0], true).unwrap();
        let y = ops::sum(&x).unwrap();
        backward(&y).unwrap();
        let err = backward(&y).unwrap_err();
        assert!(matches!(err, Error::Autodiff(_)), "got {err:?}");
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let x = Tensor::<f32>::leaf(&[3], vec![1.0, 2.0, 3.0], true).unwrap();
        let y = ops::relu(&x).unwrap();
        assert!(matches!(backward(&y), Err(Error::Autodiff(_))));
    }

    #[test]
    fn grads_accumulate_across_shared_subgraphs() {
        // y = sum(x) + sum(x) => dy/dx = 2.
        let x = Tensor::<f32>::leaf(&[2], vec![1.0, -1.0], true).unwrap();
        let s1 = ops::sum(&x).unwrap();
        let s2 = ops::sum(&x).unwrap();
        let y = ops::add(&s1, &s2).unwrap();
        backward(&y).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let x = Tensor::<f32>::leaf(&[2], vec![1.0, 2.0], true).unwrap();
        let c = Tensor::<f32>::constant(&[2], vec![3.0, 4.0]).unwrap();
        let y = ops::sum(&ops::mul(&x, &c).unwrap()).unwrap();
        backward(&y).unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, 4.0]);
        assert!(c.grad().is_none());
    }

    #[test]
    fn deep_chain_does_not_overflow_stack() {
        let mut v = Tensor::<f32>::leaf(&[1], vec![1.0], true).unwrap();
        for _ in 0..50_000 {
            v = ops::scale(&v, 1.0).unwrap();
        }
        backward(&v).unwrap();
    }
}
