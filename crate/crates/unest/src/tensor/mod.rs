//! N-dimensional tensors with a reverse-mode differentiation graph.
//!
//! A [`Tensor`] is a cheap handle (`Arc`) to an immutable value plus the op
//! that produced it. Building an expression implicitly records the graph;
//! calling [`Tensor::backward`] on a scalar walks it in reverse and leaves
//! `d(root)/d(leaf)` on every `requires_grad` leaf. Inference wraps the
//! forward pass in [`no_grad`], which suppresses recording so intermediates
//! are freed as soon as their last handle drops; [`Tensor::detach`] does the
//! same for a single value.
//!
//! Kernels are generic over [`Element`] (`f32` for training/inference, `f64`
//! for finite-difference checks). All reductions accumulate sequentially in
//! row-major order, so repeated runs are bitwise identical on one platform.

mod autodiff;
mod element;
mod gradcheck;
mod op;
mod ops_conv;
mod ops_elem;
mod ops_matmul;
mod ops_norm;
mod ops_reduce;
mod ops_shape;

pub use element::{Dtype, Element};
pub use gradcheck::{grad_check, GradCheckReport};
pub use op::{Op, OpKind};

use crate::error::{Error, Result};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock, RwLockReadGuard};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

thread_local! {
    static GRAD_ENABLED: std::cell::Cell<bool> = const { std::cell::Cell::new(true) };
}

/// Runs `f` without recording graph edges, so forward passes over tracked
/// weights free their intermediates immediately. Restores recording even if
/// `f` panics. Inference should live inside this.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a shape.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

struct TensorInner<E: Element> {
    id: u64,
    shape: Vec<usize>,
    /// Row-major values. Shared with detached views; written only through
    /// [`Tensor::update_data`] (optimizer steps on leaves).
    data: Arc<RwLock<Vec<E>>>,
    /// Gradient accumulator, populated by `backward` on `requires_grad` leaves.
    grad: RwLock<Option<Vec<E>>>,
    /// Producing op; `None` for leaves.
    op: Option<Op<E>>,
    requires_grad: bool,
}

/// Handle to a node of the computation graph. Clones share the node.
pub struct Tensor<E: Element>(Arc<TensorInner<E>>);

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor(Arc::clone(&self.0))
    }
}

impl<E: Element> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, op={}, requires_grad={})",
            self.id(),
            self.shape(),
            self.0.op.as_ref().map_or("leaf", |o| o.kind.name()),
            self.0.requires_grad
        )
    }
}

impl<E: Element> Tensor<E> {
    fn new_inner(data: Arc<RwLock<Vec<E>>>, shape: Vec<usize>, op: Option<Op<E>>, requires_grad: bool) -> Self {
        Tensor(Arc::new(TensorInner {
            id: fresh_id(),
            shape,
            data,
            grad: RwLock::new(None),
            op,
            requires_grad,
        }))
    }

    /// Leaf tensor from row-major values.
    pub fn from_vec(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        if data.len() != numel_of(shape) {
            return Err(Error::shape(format!(
                "data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                numel_of(shape)
            )));
        }
        Ok(Self::new_inner(Arc::new(RwLock::new(data)), shape.to_vec(), None, false))
    }

    /// Trainable leaf (gradients accumulate here during backward).
    pub fn param(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        let t = Self::from_vec(data, shape)?;
        Ok(Tensor(Arc::new(TensorInner {
            id: t.0.id,
            shape: t.0.shape.clone(),
            data: Arc::clone(&t.0.data),
            grad: RwLock::new(None),
            op: None,
            requires_grad: true,
        })))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, E::ZERO)
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        Self::new_inner(
            Arc::new(RwLock::new(vec![value; numel_of(shape)])),
            shape.to_vec(),
            None,
            false,
        )
    }

    pub fn scalar(value: E) -> Self {
        Self::full(&[], value)
    }

    /// Result of an op. The graph edge is kept only while some parent is
    /// tracked and recording is on, so untracked forward passes free
    /// intermediates immediately.
    pub(crate) fn from_op(kind: OpKind<E>, parents: Vec<Tensor<E>>, data: Vec<E>, shape: Vec<usize>) -> Self {
        debug_assert_eq!(data.len(), numel_of(&shape));
        let tracked = GRAD_ENABLED.with(|g| g.get()) && parents.iter().any(|p| p.is_tracked());
        let op = tracked.then(|| Op { kind, parents });
        Self::new_inner(Arc::new(RwLock::new(data)), shape, op, false)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Participates in gradient flow: either a trainable leaf or an op result
    /// downstream of one.
    pub fn is_tracked(&self) -> bool {
        self.0.requires_grad || self.0.op.is_some()
    }

    pub(crate) fn op(&self) -> Option<&Op<E>> {
        self.0.op.as_ref()
    }

    /// Read access to the row-major values.
    pub fn data(&self) -> RwLockReadGuard<'_, Vec<E>> {
        self.0.data.read().unwrap()
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.data().clone()
    }

    /// Value of a scalar (or single-element) tensor.
    pub fn item(&self) -> E {
        let d = self.data();
        assert_eq!(d.len(), 1, "item() on non-scalar tensor");
        d[0]
    }

    /// Overwrite leaf values in place (optimizer update). The shape must not
    /// change; graph nodes are never mutated.
    pub fn update_data(&self, f: impl FnOnce(&mut [E])) {
        debug_assert!(self.0.op.is_none(), "update_data on a non-leaf tensor");
        let mut d = self.0.data.write().unwrap();
        f(&mut d);
    }

    /// Leaf view sharing the same storage with no graph edge and no gradient.
    pub fn detach(&self) -> Tensor<E> {
        Self::new_inner(Arc::clone(&self.0.data), self.0.shape.clone(), None, false)
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.0.grad.read().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.write().unwrap() = None;
    }

    pub(crate) fn accumulate_grad(&self, delta: &[E]) {
        let mut g = self.0.grad.write().unwrap();
        match g.as_mut() {
            Some(acc) => {
                for (a, d) in acc.iter_mut().zip(delta) {
                    *a += *d;
                }
            }
            None => *g = Some(delta.to_vec()),
        }
    }

    /// Cast to another element type (exact when widening).
    pub fn cast<F: Element>(&self) -> Tensor<F> {
        let data = self.data().iter().map(|v| F::from_f64(v.to_f64())).collect();
        let t = Tensor::<F>::from_vec(data, self.shape()).expect("same shape");
        if self.requires_grad() {
            Tensor(Arc::new(TensorInner {
                id: t.0.id,
                shape: t.0.shape.clone(),
                data: Arc::clone(&t.0.data),
                grad: RwLock::new(None),
                op: None,
                requires_grad: true,
            }))
        } else {
            t
        }
    }

    /// Reverse-mode differentiation from a scalar root. Gradients accumulate
    /// additively on every reachable `requires_grad` leaf; unreached leaves
    /// keep their current (absent = zero) gradient.
    pub fn backward(&self) -> Result<()> {
        autodiff::backward(self)
    }
}

/// Relative error |a - b| / max(1, |a|, |b|), the gradcheck metric.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_roundtrip() {
        let t = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.numel(), 6);
        assert_eq!(t.to_vec(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(!t.is_tracked());
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(Tensor::<f64>::from_vec(vec![1.0; 5], &[2, 3]).is_err());
    }

    #[test]
    fn detach_shares_storage() {
        let p = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let d = p.detach();
        assert!(!d.is_tracked());
        p.update_data(|v| v[0] = 9.0);
        assert_eq!(d.to_vec(), vec![9.0, 2.0]);
    }

    #[test]
    fn strides_row_major() {
        assert_eq!(strides_of(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides_of(&[5]), vec![1]);
        let empty: Vec<usize> = vec![];
        assert_eq!(strides_of(&[]), empty);
    }

    #[test]
    fn no_grad_suppresses_recording() {
        let p = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let tracked = p.mul_scalar(2.0);
        assert!(tracked.is_tracked());
        let silent = no_grad(|| p.mul_scalar(2.0));
        assert!(!silent.is_tracked());
        assert_eq!(silent.to_vec(), tracked.to_vec());
        // Recording resumes after the scope, even across an unwind.
        assert!(p.mul_scalar(1.0).is_tracked());
        let _ = std::panic::catch_unwind(|| no_grad(|| panic!("boom")));
        assert!(p.mul_scalar(1.0).is_tracked());
    }
}
