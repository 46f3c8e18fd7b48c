//! Tape-based reverse-mode automatic differentiation over dense row-major
//! tensors.
//!
//! A [`Tensor`] is a cheap handle (`Rc`) onto a graph node holding the
//! value, an optional gradient, and a backward closure that scatters the
//! node's gradient into its parents. [`Tensor::backward`] walks the graph
//! in reverse topological order from a scalar loss. Graphs are built and
//! consumed on a single thread (nodes are deliberately `!Send`); heavy ops
//! parallelize internally over independent output slices, which keeps
//! results bit-identical for any worker count.
//!
//! Design choices, fixed once here:
//! * gradients accumulate across repeated `backward` calls until
//!   [`zero_grad`](Tensor::zero_grad) is called explicitly;
//! * `relu` uses subgradient 0 at 0;
//! * no higher-order derivatives — backward closures do plain arithmetic;
//! * kernels are straightforward loops (no im2col, no FFT), accumulating in
//!   the element type.

mod conv;
mod grad_check;
mod loss;
mod ops;
mod optim;

pub mod checkpoint;

pub use conv::{avg_pool3d, conv2d, conv3d, conv_transpose2d, conv_transpose3d};
pub use grad_check::{grad_check, GradCheckReport, Probe};
pub use loss::{bce_with_logits, l1_loss};
pub use optim::{Adam, Optimizer, ParamGroup, Sgd};

use crate::{Error, Result, Scalar};
use std::cell::{Cell, RefCell};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_NODE_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Run `f` with gradient recording disabled on this thread. Ops executed
/// inside produce leaf tensors with no parents, so inference allocates no
/// tape.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let was = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(was));
    out
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

type BackwardFn<T> = Box<dyn Fn(&[T])>;

struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    /// Upstream nodes, kept for the topological walk.
    parents: Vec<Tensor<T>>,
    /// Scatters this node's gradient into the parents' gradients.
    backward: Option<BackwardFn<T>>,
}

/// Dense row-major tensor with reverse-mode autodiff.
pub struct Tensor<T: Scalar> {
    node: Rc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { node: Rc::clone(&self.node) }
    }
}

impl<T: Scalar> Tensor<T> {
    // ── Construction ────────────────────────────────────────────────────

    fn leaf(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            node: Rc::new(Node {
                id: NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// New result node. `backward` receives the node's gradient and must
    /// accumulate into the parents; it is dropped (and the tape with it)
    /// when recording is disabled or no parent tracks gradients.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T]) + 'static,
    ) -> Self {
        let track = grad_enabled() && parents.iter().any(|p| p.node.requires_grad);
        assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            node: Rc::new(Node {
                id: NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: track,
                parents: if track { parents } else { Vec::new() },
                backward: if track { Some(Box::new(backward)) } else { None },
            }),
        }
    }

    /// Leaf tensor from explicit data. `requires_grad` marks parameters.
    pub fn from_vec(shape: &[usize], data: Vec<T>, requires_grad: bool) -> Self {
        Tensor::leaf(shape.to_vec(), data, requires_grad)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::leaf(shape.to_vec(), vec![T::zero(); shape.iter().product()], false)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::leaf(shape.to_vec(), vec![T::one(); shape.iter().product()], false)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor::leaf(shape.to_vec(), vec![value; shape.iter().product()], false)
    }

    pub fn scalar(value: T) -> Self {
        Tensor::leaf(vec![1], vec![value], false)
    }

    /// Uniform values in `[lo, hi)`, drawn in `f64` and narrowed, so the
    /// stream of draws is identical for `f32` and `f64` tensors.
    pub fn rand_uniform(
        shape: &[usize],
        lo: f64,
        hi: f64,
        rng: &mut impl rand::Rng,
        requires_grad: bool,
    ) -> Self {
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n)
            .map(|_| T::from_f64(rng.gen_range(lo..hi)))
            .collect();
        Tensor::leaf(shape.to_vec(), data, requires_grad)
    }

    /// Standard-normal values scaled by `std`, drawn in `f64`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl rand::Rng, requires_grad: bool) -> Self {
        use rand_distr::Distribution;
        let dist = rand_distr::StandardNormal;
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n)
            .map(|_| {
                let z: f64 = dist.sample(rng);
                T::from_f64(z * std)
            })
            .collect();
        Tensor::leaf(shape.to_vec(), data, requires_grad)
    }

    // ── Accessors ───────────────────────────────────────────────────────

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Borrow the value buffer.
    pub fn data(&self) -> std::cell::Ref<'_, Vec<T>> {
        self.node.data.borrow()
    }

    /// Copy of the value buffer.
    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.node.data.borrow()[0]
    }

    /// Copy of the gradient; all zeros when no gradient has reached this
    /// node (e.g. tensors off the path to the loss).
    pub fn grad(&self) -> Vec<T> {
        self.node
            .grad
            .borrow()
            .clone()
            .unwrap_or_else(|| vec![T::zero(); self.numel()])
    }

    /// Reset this node's gradient to zero. Gradients otherwise accumulate
    /// across `backward` calls.
    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Whether a gradient has been accumulated since the last reset.
    pub fn has_grad(&self) -> bool {
        self.node.grad.borrow().is_some()
    }

    /// Detached copy: same values, fresh leaf, no history.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::leaf(self.node.shape.clone(), self.to_vec(), false)
    }

    /// Overwrite values in place (optimizer/update path). The graph treats
    /// parameters as leaves, so this never invalidates a live tape.
    pub(crate) fn set_data(&self, new: &[T]) {
        let mut d = self.node.data.borrow_mut();
        assert_eq!(d.len(), new.len());
        d.copy_from_slice(new);
    }

    pub(crate) fn accumulate_grad(&self, delta: &[T]) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Accumulate into the gradient only if this node wants one (a
    /// parameter or an interior node on a tracked path).
    pub(crate) fn accumulate_grad_if_tracked(&self, delta: &[T]) {
        if self.node.requires_grad {
            self.accumulate_grad(delta);
        }
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar. Seeds `d(self)/d(self) = 1`, then
    /// visits every reachable node in reverse topological order, calling
    /// each backward closure with the node's accumulated gradient.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        // Iterative post-order DFS; recursion would overflow on deep tapes.
        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.node.id);
        while let Some((t, child)) = stack.pop() {
            if child < t.node.parents.len() {
                let next = t.node.parents[child].clone();
                stack.push((t, child + 1));
                if visited.insert(next.node.id) {
                    stack.push((next, 0));
                }
            } else {
                order.push(t);
            }
        }
        self.accumulate_grad(&[T::one()]);
        for node in order.iter().rev() {
            if let Some(back) = &node.node.backward {
                let g = node.node.grad.borrow();
                if let Some(g) = g.as_ref() {
                    back(g);
                }
            }
        }
        Ok(())
    }
}

impl<T: Scalar> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape())?;
        if self.numel() <= 8 {
            write!(f, " {:?}", &self.data()[..])?;
        }
        Ok(())
    }
}

/// Shape helper: product of all dims after the first two (spatial volume).
pub(crate) fn spatial_numel(shape: &[usize]) -> usize {
    shape[2..].iter().product()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_shape_data_invariant() {
        let t = Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 6], false);
        assert_eq!(t.numel(), 6);
        assert_eq!(t.shape(), &[2, 3]);
    }

    #[test]
    #[should_panic]
    fn mismatched_data_length_panics() {
        let _ = Tensor::<f64>::from_vec(&[2, 3], vec![0.0; 5], false);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let t = Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0], true);
        assert!(t.backward().is_err());
    }

    #[test]
    fn grad_of_unreached_tensor_is_zeros() {
        let a = Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0], true);
        let b = Tensor::<f64>::from_vec(&[2], vec![3.0, 4.0], true);
        let loss = a.sum();
        loss.backward().unwrap();
        assert_eq!(a.grad(), vec![1.0, 1.0]);
        assert_eq!(b.grad(), vec![0.0, 0.0]);
    }

    #[test]
    fn repeated_backward_accumulates_until_reset() {
        let a = Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0], true);
        let loss = a.sum();
        loss.backward().unwrap();
        // Re-run the same tape; the seed and every contribution double up.
        loss.zero_grad();
        for p in &loss.node.parents {
            let _ = p;
        }
        let loss2 = a.sum();
        loss2.backward().unwrap();
        assert_eq!(a.grad(), vec![2.0, 2.0]);
        a.zero_grad();
        assert_eq!(a.grad(), vec![0.0, 0.0]);
    }

    #[test]
    fn no_grad_builds_no_tape() {
        let a = Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0], true);
        let out = no_grad(|| a.scale(2.0));
        assert!(!out.requires_grad());
        assert!(out.node.parents.is_empty());
    }
}
