//! Softmax and normalization layers.

use super::autodiff::GradStore;
use super::op::OpKind;
use super::ops_reduce::axis_split;
use super::{Element, Tensor};
use crate::error::{Error, Result};

impl<E: Element> Tensor<E> {
    /// Numerically stable softmax along `axis` (max-shifted exponentials).
    pub fn softmax(&self, axis: usize) -> Result<Tensor<E>> {
        if axis >= self.shape().len() {
            return Err(Error::shape(format!(
                "softmax axis {} out of rank {}",
                axis,
                self.shape().len()
            )));
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let mut out = vec![E::ZERO; self.numel()];
        {
            let d = self.data();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * len + a) * inner + i;
                    let mut m = d[at(0)];
                    for a in 1..len {
                        m = m.maximum(d[at(a)]);
                    }
                    let mut sum = E::ZERO;
                    for a in 0..len {
                        let e = (d[at(a)] - m).exp();
                        out[at(a)] = e;
                        sum += e;
                    }
                    for a in 0..len {
                        out[at(a)] /= sum;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            OpKind::Softmax { axis },
            vec![self.clone()],
            out,
            self.shape().to_vec(),
        ))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<E>> {
        if axis >= self.shape().len() {
            return Err(Error::shape(format!(
                "log_softmax axis {} out of rank {}",
                axis,
                self.shape().len()
            )));
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let mut out = vec![E::ZERO; self.numel()];
        {
            let d = self.data();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |a: usize| (o * len + a) * inner + i;
                    let mut m = d[at(0)];
                    for a in 1..len {
                        m = m.maximum(d[at(a)]);
                    }
                    let mut sum = E::ZERO;
                    for a in 0..len {
                        sum += (d[at(a)] - m).exp();
                    }
                    let lse = m + sum.ln();
                    for a in 0..len {
                        out[at(a)] = d[at(a)] - lse;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            OpKind::LogSoftmax { axis },
            vec![self.clone()],
            out,
            self.shape().to_vec(),
        ))
    }

    /// Normalizes the last axis to zero mean and unit variance (biased
    /// variance), then applies the learnable scale and shift.
    pub fn layer_norm(&self, scale: &Tensor<E>, shift: &Tensor<E>, eps: E) -> Result<Tensor<E>> {
        let rank = self.shape().len();
        if rank == 0 {
            return Err(Error::shape("layer_norm requires rank >= 1"));
        }
        let c = self.shape()[rank - 1];
        if scale.shape() != [c] || shift.shape() != [c] {
            return Err(Error::shape(format!(
                "layer_norm scale/shift must have shape [{}], got {:?}/{:?}",
                c,
                scale.shape(),
                shift.shape()
            )));
        }
        let rows = self.numel() / c;
        let mut out = vec![E::ZERO; self.numel()];
        {
            let x = self.data();
            let gamma = scale.data();
            let beta = shift.data();
            for r in 0..rows {
                let row = &x[r * c..(r + 1) * c];
                let (mean, inv) = mean_inv_std(row, eps);
                for j in 0..c {
                    out[r * c + j] = gamma[j] * ((row[j] - mean) * inv) + beta[j];
                }
            }
        }
        Ok(Tensor::from_op(
            OpKind::LayerNorm { eps },
            vec![self.clone(), scale.clone(), shift.clone()],
            out,
            self.shape().to_vec(),
        ))
    }

    /// Normalizes each (batch, channel) slice over all spatial axes. No
    /// learnable parameters.
    pub fn instance_norm(&self, eps: E) -> Result<Tensor<E>> {
        let shape = self.shape();
        if shape.len() < 3 {
            return Err(Error::shape(format!(
                "instance_norm requires (batch, channel, spatial..) input, got {:?}",
                shape
            )));
        }
        let groups = shape[0] * shape[1];
        let span = self.numel() / groups;
        let mut out = vec![E::ZERO; self.numel()];
        {
            let x = self.data();
            for gidx in 0..groups {
                let row = &x[gidx * span..(gidx + 1) * span];
                let (mean, inv) = mean_inv_std(row, eps);
                for j in 0..span {
                    out[gidx * span + j] = (row[j] - mean) * inv;
                }
            }
        }
        Ok(Tensor::from_op(
            OpKind::InstanceNorm { eps },
            vec![self.clone()],
            out,
            shape.to_vec(),
        ))
    }
}

/// Mean and 1/sqrt(var + eps) with biased variance, accumulated in order.
fn mean_inv_std<E: Element>(row: &[E], eps: E) -> (E, E) {
    let n = E::from_f64(row.len() as f64);
    let mut sum = E::ZERO;
    for v in row {
        sum += *v;
    }
    let mean = sum / n;
    let mut ss = E::ZERO;
    for v in row {
        let d = *v - mean;
        ss += d * d;
    }
    let inv = E::ONE / (ss / n + eps).sqrt();
    (mean, inv)
}

pub(crate) fn softmax_backward<E: Element>(
    node: &Tensor<E>,
    p: &[Tensor<E>],
    g: &[E],
    axis: usize,
    store: &mut GradStore<E>,
) {
    if !p[0].is_tracked() {
        return;
    }
    let (outer, len, inner) = axis_split(node.shape(), axis);
    let y = node.data();
    let mut delta = vec![E::ZERO; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let mut dot = E::ZERO;
            for a in 0..len {
                dot += g[at(a)] * y[at(a)];
            }
            for a in 0..len {
                delta[at(a)] = y[at(a)] * (g[at(a)] - dot);
            }
        }
    }
    drop(y);
    store.add_owned(&p[0], delta);
}

pub(crate) fn log_softmax_backward<E: Element>(
    node: &Tensor<E>,
    p: &[Tensor<E>],
    g: &[E],
    axis: usize,
    store: &mut GradStore<E>,
) {
    if !p[0].is_tracked() {
        return;
    }
    let (outer, len, inner) = axis_split(node.shape(), axis);
    let y = node.data();
    let mut delta = vec![E::ZERO; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * len + a) * inner + i;
            let mut gsum = E::ZERO;
            for a in 0..len {
                gsum += g[at(a)];
            }
            for a in 0..len {
                delta[at(a)] = g[at(a)] - y[at(a)].exp() * gsum;
            }
        }
    }
    drop(y);
    store.add_owned(&p[0], delta);
}

pub(crate) fn layer_norm_backward<E: Element>(p: &[Tensor<E>], g: &[E], eps: E, store: &mut GradStore<E>) {
    let c = *p[0].shape().last().unwrap();
    let rows = p[0].numel() / c;
    let x = p[0].data();
    let gamma = p[1].data();
    let inv_c = E::ONE / E::from_f64(c as f64);

    if p[0].is_tracked() {
        let mut delta = vec![E::ZERO; x.len()];
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let grow = &g[r * c..(r + 1) * c];
            let (mean, inv) = mean_inv_std(row, eps);
            let mut mh = E::ZERO;
            let mut mhx = E::ZERO;
            for j in 0..c {
                let h = gamma[j] * grow[j];
                let xh = (row[j] - mean) * inv;
                mh += h;
                mhx += h * xh;
            }
            mh *= inv_c;
            mhx *= inv_c;
            for j in 0..c {
                let h = gamma[j] * grow[j];
                let xh = (row[j] - mean) * inv;
                delta[r * c + j] = inv * (h - mh - xh * mhx);
            }
        }
        store.add_owned(&p[0], delta);
    }

    if p[1].is_tracked() {
        let mut dgamma = vec![E::ZERO; c];
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let (mean, inv) = mean_inv_std(row, eps);
            for j in 0..c {
                dgamma[j] += g[r * c + j] * ((row[j] - mean) * inv);
            }
        }
        store.add_owned(&p[1], dgamma);
    }

    if p[2].is_tracked() {
        let mut dbeta = vec![E::ZERO; c];
        for r in 0..rows {
            for j in 0..c {
                dbeta[j] += g[r * c + j];
            }
        }
        store.add_owned(&p[2], dbeta);
    }
}

pub(crate) fn instance_norm_backward<E: Element>(p: &[Tensor<E>], g: &[E], eps: E, store: &mut GradStore<E>) {
    if !p[0].is_tracked() {
        return;
    }
    let shape = p[0].shape();
    let groups = shape[0] * shape[1];
    let span = p[0].numel() / groups;
    let inv_n = E::ONE / E::from_f64(span as f64);
    let x = p[0].data();
    let mut delta = vec![E::ZERO; x.len()];
    for gi in 0..groups {
        let row = &x[gi * span..(gi + 1) * span];
        let grow = &g[gi * span..(gi + 1) * span];
        let (mean, inv) = mean_inv_std(row, eps);
        let mut mg = E::ZERO;
        let mut mgx = E::ZERO;
        for j in 0..span {
            let xh = (row[j] - mean) * inv;
            mg += grow[j];
            mgx += grow[j] * xh;
        }
        mg *= inv_n;
        mgx *= inv_n;
        for j in 0..span {
            let xh = (row[j] - mean) * inv;
            delta[gi * span + j] = inv * (grow[j] - mg - xh * mgx);
        }
    }
    drop(x);
    store.add_owned(&p[0], delta);
}
