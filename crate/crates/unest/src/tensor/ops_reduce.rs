//! Reductions. All accumulate sequentially in row-major order.

use super::autodiff::GradStore;
use super::op::OpKind;
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// (outer, axis, inner) factorization used by every axis op.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl<E: Element> Tensor<E> {
    pub fn sum_all(&self) -> Tensor<E> {
        let mut acc = E::ZERO;
        for v in self.data().iter() {
            acc += *v;
        }
        Tensor::from_op(OpKind::SumAll, vec![self.clone()], vec![acc], vec![])
    }

    pub fn mean_all(&self) -> Tensor<E> {
        let n = self.numel().max(1);
        self.sum_all().mul_scalar(E::ONE / E::from_f64(n as f64))
    }

    /// Sums over one axis, removing it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<E>> {
        if axis >= self.shape().len() {
            return Err(Error::shape(format!(
                "sum_axis {} out of rank {}",
                axis,
                self.shape().len()
            )));
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let mut out = vec![E::ZERO; outer * inner];
        {
            let d = self.data();
            for o in 0..outer {
                for a in 0..len {
                    let base = (o * len + a) * inner;
                    let dst = o * inner;
                    for i in 0..inner {
                        out[dst + i] += d[base + i];
                    }
                }
            }
        }
        let mut out_shape = self.shape().to_vec();
        out_shape.remove(axis);
        Ok(Tensor::from_op(
            OpKind::SumAxis { axis },
            vec![self.clone()],
            out,
            out_shape,
        ))
    }

    /// Index of the maximum along an axis (first index wins ties), removing
    /// the axis. Indices are returned as exactly representable floats. Not
    /// differentiable.
    pub fn argmax_axis(&self, axis: usize) -> Result<Tensor<E>> {
        if axis >= self.shape().len() {
            return Err(Error::shape(format!(
                "argmax_axis {} out of rank {}",
                axis,
                self.shape().len()
            )));
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let mut out = vec![E::ZERO; outer * inner];
        {
            let d = self.data();
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = 0usize;
                    let mut best_v = d[o * len * inner + i];
                    for a in 1..len {
                        let v = d[(o * len + a) * inner + i];
                        if v > best_v {
                            best_v = v;
                            best = a;
                        }
                    }
                    out[o * inner + i] = E::from_f64(best as f64);
                }
            }
        }
        let mut out_shape = self.shape().to_vec();
        out_shape.remove(axis);
        Ok(Tensor::from_op(
            OpKind::ArgmaxAxis { axis },
            vec![self.clone()],
            out,
            out_shape,
        ))
    }
}

pub(crate) fn sum_axis_backward<E: Element>(p: &[Tensor<E>], g: &[E], axis: usize, store: &mut GradStore<E>) {
    if !p[0].is_tracked() {
        return;
    }
    let (outer, len, inner) = axis_split(p[0].shape(), axis);
    let mut delta = vec![E::ZERO; p[0].numel()];
    for o in 0..outer {
        for a in 0..len {
            let dst = (o * len + a) * inner;
            let src = o * inner;
            delta[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
        }
    }
    store.add_owned(&p[0], delta);
}
