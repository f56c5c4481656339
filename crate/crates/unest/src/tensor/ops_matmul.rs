//! Batched matrix product. The rhs is either rank 2 (shared across every
//! batch) or has leading dims equal to the lhs (per-batch product).

use super::autodiff::GradStore;
use super::op::OpKind;
use super::{numel_of, Element, Tensor};
use crate::error::{Error, Result};

struct MatmulDims {
    batches: usize,
    m: usize,
    k: usize,
    n: usize,
    rhs_shared: bool,
}

fn dims<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<MatmulDims> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() < 2 || bsh.len() < 2 {
        return Err(Error::shape(format!(
            "matmul requires rank >= 2 operands, got {:?} and {:?}",
            ash, bsh
        )));
    }
    let rhs_shared = bsh.len() == 2 && ash.len() > 2;
    if !rhs_shared && bsh[..bsh.len() - 2] != ash[..ash.len() - 2] {
        return Err(Error::shape(format!(
            "matmul leading dims must match (or rhs be rank 2), got {:?} and {:?}",
            ash, bsh
        )));
    }
    let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dims differ: {:?} x {:?}",
            ash, bsh
        )));
    }
    Ok(MatmulDims {
        batches: numel_of(&ash[..ash.len() - 2]),
        m,
        k,
        n,
        rhs_shared,
    })
}

impl<E: Element> Tensor<E> {
    pub fn matmul(&self, rhs: &Tensor<E>) -> Result<Tensor<E>> {
        let d = dims(self, rhs)?;
        let mut out_shape = self.shape()[..self.shape().len() - 2].to_vec();
        out_shape.push(d.m);
        out_shape.push(d.n);
        let mut out = vec![E::ZERO; d.batches * d.m * d.n];
        {
            let a = self.data();
            let b = rhs.data();
            for bi in 0..d.batches {
                let boff = if d.rhs_shared { 0 } else { bi * d.k * d.n };
                E::gemm(
                    d.m,
                    d.k,
                    d.n,
                    E::ONE,
                    &a[bi * d.m * d.k..],
                    &b[boff..],
                    E::ZERO,
                    &mut out[bi * d.m * d.n..],
                );
            }
        }
        Ok(Tensor::from_op(
            OpKind::Matmul,
            vec![self.clone(), rhs.clone()],
            out,
            out_shape,
        ))
    }
}

pub(crate) fn matmul_backward<E: Element>(p: &[Tensor<E>], g: &[E], store: &mut GradStore<E>) {
    let d = dims(&p[0], &p[1]).expect("shapes validated in forward");
    let (m, k, n) = (d.m, d.k, d.n);
    if p[0].is_tracked() {
        // dA[bi] = g[bi] @ B[bi]^T, accumulated in case A feeds other ops too.
        let b = p[1].data();
        let da = store.buf(&p[0]).expect("tracked");
        for bi in 0..d.batches {
            let boff = if d.rhs_shared { 0 } else { bi * k * n };
            E::gemm_strided(
                m,
                n,
                k,
                E::ONE,
                &g[bi * m * n..],
                n,
                1,
                &b[boff..],
                1,
                n,
                E::ONE,
                &mut da[bi * m * k..],
            );
        }
    }
    if p[1].is_tracked() {
        // dB[bi] = A[bi]^T @ g[bi]; a shared rhs sums over batches.
        let a = p[0].data();
        let db = store.buf(&p[1]).expect("tracked");
        for bi in 0..d.batches {
            let boff = if d.rhs_shared { 0 } else { bi * k * n };
            E::gemm_strided(
                k,
                m,
                n,
                E::ONE,
                &a[bi * m * k..],
                1,
                k,
                &g[bi * m * n..],
                n,
                1,
                E::ONE,
                &mut db[boff..],
            );
        }
    }
}
