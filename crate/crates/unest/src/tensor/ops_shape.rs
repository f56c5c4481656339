//! Layout ops: reshape, permute, concat, slice.

use super::autodiff::GradStore;
use super::op::OpKind;
use super::{numel_of, strides_of, Element, Tensor};
use crate::error::{Error, Result};

/// out.shape[i] = shape[axes[i]]; out[idx] = in at the index with axes undone.
pub(crate) fn permute_data<E: Element>(data: &[E], shape: &[usize], axes: &[usize]) -> (Vec<E>, Vec<usize>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides_of(shape);
    let gather: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let out_strides = strides_of(&out_shape);
    let n = data.len();
    let mut out = vec![E::ZERO; n];
    let rank = axes.len();
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut rem = flat;
        let mut src = 0usize;
        for d in 0..rank {
            let idx = rem / out_strides[d];
            rem -= idx * out_strides[d];
            src += idx * gather[d];
        }
        *slot = data[src];
    }
    (out, out_shape)
}

impl<E: Element> Tensor<E> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        if numel_of(shape) != self.numel() {
            return Err(Error::shape(format!(
                "reshape from {:?} to {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::from_op(
            OpKind::Reshape,
            vec![self.clone()],
            self.to_vec(),
            shape.to_vec(),
        ))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<E>> {
        let rank = self.shape().len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(format!(
                "permute axes {:?} are not a permutation of 0..{}",
                axes, rank
            )));
        }
        let (data, out_shape) = permute_data(&self.data(), self.shape(), axes);
        Ok(Tensor::from_op(
            OpKind::Permute { axes: axes.to_vec() },
            vec![self.clone()],
            data,
            out_shape,
        ))
    }

    pub fn concat(parts: &[Tensor<E>], axis: usize) -> Result<Tensor<E>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(Error::shape(format!("concat axis {} out of rank {}", axis, rank)));
        }
        let mut axis_total = 0usize;
        for t in parts {
            let s = t.shape();
            let compatible = s.len() == rank
                && s.iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape(format!(
                    "concat shapes differ outside axis {}: {:?} vs {:?}",
                    axis,
                    first.shape(),
                    s
                )));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = axis_total;
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(numel_of(&out_shape));
        let guards: Vec<_> = parts.iter().map(|t| t.data()).collect();
        for o in 0..outer {
            for (t, d) in parts.iter().zip(&guards) {
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&d[o * block..(o + 1) * block]);
            }
        }
        drop(guards);
        Ok(Tensor::from_op(OpKind::Concat { axis }, parts.to_vec(), out, out_shape))
    }

    pub fn slice(&self, start: &[usize], len: &[usize]) -> Result<Tensor<E>> {
        let shape = self.shape();
        let rank = shape.len();
        if start.len() != rank || len.len() != rank {
            return Err(Error::shape(format!(
                "slice start/len must have rank {}, got {:?}/{:?}",
                rank, start, len
            )));
        }
        for i in 0..rank {
            if len[i] == 0 || start[i] + len[i] > shape[i] {
                return Err(Error::shape(format!(
                    "slice window start {:?} len {:?} exceeds shape {:?}",
                    start, len, shape
                )));
            }
        }
        let data = {
            let d = self.data();
            let mut out = Vec::with_capacity(numel_of(len));
            copy_window(&d, shape, start, len, &mut |row| out.extend_from_slice(row));
            out
        };
        Ok(Tensor::from_op(
            OpKind::Slice {
                start: start.to_vec(),
                len: len.to_vec(),
            },
            vec![self.clone()],
            data,
            len.to_vec(),
        ))
    }
}

/// Walks the window row by row (innermost axis contiguous), handing each
/// source row to `visit` together with its flat offset into the full tensor.
fn copy_window<'a, E: Element>(
    data: &'a [E],
    shape: &[usize],
    start: &[usize],
    len: &[usize],
    visit: &mut impl FnMut(&'a [E]),
) {
    for_each_row(shape, start, len, &mut |off, row_len| visit(&data[off..off + row_len]));
}

/// Flat offsets of every contiguous row in the window.
fn for_each_row(shape: &[usize], start: &[usize], len: &[usize], visit: &mut impl FnMut(usize, usize)) {
    let rank = shape.len();
    if rank == 0 {
        visit(0, 1);
        return;
    }
    let strides = strides_of(shape);
    let row_len = len[rank - 1];
    let lead_rows: usize = len[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    for _ in 0..lead_rows {
        let mut off = start[rank - 1];
        for d in 0..rank - 1 {
            off += (start[d] + idx[d]) * strides[d];
        }
        visit(off, row_len);
        for d in (0..rank.saturating_sub(1)).rev() {
            idx[d] += 1;
            if idx[d] < len[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

pub(crate) fn permute_backward<E: Element>(
    p: &[Tensor<E>],
    node_shape: &[usize],
    g: &[E],
    axes: &[usize],
    store: &mut GradStore<E>,
) {
    if !p[0].is_tracked() {
        return;
    }
    let mut inverse = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inverse[a] = i;
    }
    let (delta, _) = permute_data(g, node_shape, &inverse);
    store.add_owned(&p[0], delta);
}

pub(crate) fn concat_backward<E: Element>(
    p: &[Tensor<E>],
    node_shape: &[usize],
    g: &[E],
    axis: usize,
    store: &mut GradStore<E>,
) {
    let outer: usize = node_shape[..axis].iter().product();
    let inner: usize = node_shape[axis + 1..].iter().product();
    let total_block = node_shape[axis] * inner;
    let mut axis_off = 0usize;
    for t in p {
        let block = t.shape()[axis] * inner;
        if t.is_tracked() {
            let mut delta = Vec::with_capacity(t.numel());
            for o in 0..outer {
                let src = o * total_block + axis_off;
                delta.extend_from_slice(&g[src..src + block]);
            }
            store.add_owned(t, delta);
        }
        axis_off += block;
    }
}

pub(crate) fn slice_backward<E: Element>(
    p: &[Tensor<E>],
    g: &[E],
    start: &[usize],
    len: &[usize],
    store: &mut GradStore<E>,
) {
    let shape = p[0].shape().to_vec();
    if let Some(dx) = store.buf(&p[0]) {
        let mut cursor = 0usize;
        for_each_row(&shape, start, len, &mut |off, row_len| {
            for j in 0..row_len {
                dx[off + j] += g[cursor + j];
            }
            cursor += row_len;
        });
    }
}
