//! Reverse walk over the recorded graph.

use super::op::OpKind;
use super::{ops_conv, ops_elem, ops_matmul, ops_norm, ops_reduce, ops_shape};
use super::{Element, Tensor};
use crate::error::{Error, Result};
use std::collections::{HashMap, HashSet};

/// Cotangent accumulator keyed by tensor id. Entries are created zeroed, so
/// kernels may either `add` a finished buffer or scatter into `buf` directly.
/// Untracked parents are skipped at this boundary, which both prunes dead
/// subgraphs and keeps kernels free of tracking logic.
pub(crate) struct GradStore<E: Element> {
    map: HashMap<u64, Vec<E>>,
}

impl<E: Element> GradStore<E> {
    fn new() -> Self {
        GradStore { map: HashMap::new() }
    }

    pub(crate) fn add(&mut self, t: &Tensor<E>, delta: &[E]) {
        if !t.is_tracked() {
            return;
        }
        debug_assert_eq!(delta.len(), t.numel());
        match self.map.entry(t.id()) {
            std::collections::hash_map::Entry::Occupied(mut e) => {
                for (a, d) in e.get_mut().iter_mut().zip(delta) {
                    *a += *d;
                }
            }
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(delta.to_vec());
            }
        }
    }

    pub(crate) fn add_owned(&mut self, t: &Tensor<E>, delta: Vec<E>) {
        if !t.is_tracked() {
            return;
        }
        debug_assert_eq!(delta.len(), t.numel());
        match self.map.entry(t.id()) {
            std::collections::hash_map::Entry::Occupied(mut e) => {
                for (a, d) in e.get_mut().iter_mut().zip(&delta) {
                    *a += *d;
                }
            }
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(delta);
            }
        }
    }

    /// Zero-initialized accumulator for `t`, or `None` when `t` is untracked
    /// and the caller should skip the work entirely.
    pub(crate) fn buf(&mut self, t: &Tensor<E>) -> Option<&mut [E]> {
        if !t.is_tracked() {
            return None;
        }
        Some(
            self.map
                .entry(t.id())
                .or_insert_with(|| vec![E::ZERO; t.numel()])
                .as_mut_slice(),
        )
    }

    fn take(&mut self, id: u64) -> Option<Vec<E>> {
        self.map.remove(&id)
    }
}

pub(super) fn backward<E: Element>(root: &Tensor<E>) -> Result<()> {
    if root.numel() != 1 {
        return Err(Error::autodiff(format!(
            "backward requires a scalar root, got shape {:?}",
            root.shape()
        )));
    }
    if !root.is_tracked() {
        return Err(Error::autodiff(
            "backward on a tensor with no recorded graph and no requires_grad leaf",
        ));
    }
    if root.op().is_none() {
        // The root itself is a trainable leaf.
        root.accumulate_grad(&[E::ONE]);
        return Ok(());
    }

    // Iterative DFS postorder: parents land before their consumers, so the
    // reversed order propagates every cotangent before its node is popped.
    let mut order: Vec<Tensor<E>> = Vec::new();
    let mut leaves: Vec<Tensor<E>> = Vec::new();
    let mut entered: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor<E>, usize)> = vec![(root.clone(), 0)];
    entered.insert(root.id());
    while let Some((node, next)) = stack.pop() {
        let op = node.op().expect("only op nodes are stacked");
        if next < op.parents.len() {
            let parent = op.parents[next].clone();
            stack.push((node, next + 1));
            if parent.is_tracked() && entered.insert(parent.id()) {
                if parent.op().is_some() {
                    stack.push((parent, 0));
                } else if parent.requires_grad() {
                    leaves.push(parent);
                }
            }
        } else {
            order.push(node);
        }
    }

    let mut store = GradStore::new();
    store.add(root, &[E::ONE]);
    for node in order.iter().rev() {
        let Some(g) = store.take(node.id()) else {
            continue;
        };
        propagate(node, &g, &mut store)?;
    }

    for leaf in &leaves {
        if let Some(g) = store.take(leaf.id()) {
            leaf.accumulate_grad(&g);
        }
    }
    Ok(())
}

fn propagate<E: Element>(node: &Tensor<E>, g: &[E], store: &mut GradStore<E>) -> Result<()> {
    let op = node.op().expect("propagate on leaf");
    let p = &op.parents;
    match &op.kind {
        OpKind::Add => {
            store.add(&p[0], g);
            store.add(&p[1], g);
        }
        OpKind::Sub => {
            store.add(&p[0], g);
            if p[1].is_tracked() {
                store.add_owned(&p[1], g.iter().map(|v| -*v).collect());
            }
        }
        OpKind::Mul => {
            if p[0].is_tracked() {
                let b = p[1].data();
                store.add_owned(&p[0], g.iter().zip(b.iter()).map(|(gv, bv)| *gv * *bv).collect());
            }
            if p[1].is_tracked() {
                let a = p[0].data();
                store.add_owned(&p[1], g.iter().zip(a.iter()).map(|(gv, av)| *gv * *av).collect());
            }
        }
        OpKind::Div => {
            if p[0].is_tracked() {
                let b = p[1].data();
                store.add_owned(&p[0], g.iter().zip(b.iter()).map(|(gv, bv)| *gv / *bv).collect());
            }
            if p[1].is_tracked() {
                let a = p[0].data();
                let b = p[1].data();
                let delta = g
                    .iter()
                    .zip(a.iter().zip(b.iter()))
                    .map(|(gv, (av, bv))| -(*gv * *av) / (*bv * *bv))
                    .collect();
                store.add_owned(&p[1], delta);
            }
        }
        OpKind::AddScalar(_) => store.add(&p[0], g),
        OpKind::MulScalar(s) => {
            if p[0].is_tracked() {
                store.add_owned(&p[0], g.iter().map(|v| *v * *s).collect());
            }
        }
        OpKind::BiasAdd => ops_elem::bias_add_backward(p, g, store),
        OpKind::Matmul => ops_matmul::matmul_backward(p, g, store),
        OpKind::Gelu => ops_elem::gelu_backward(p, g, store),
        OpKind::LeakyRelu(slope) => ops_elem::leaky_relu_backward(p, g, *slope, store),
        OpKind::Ln { floor } => ops_elem::ln_backward(p, g, *floor, store),
        OpKind::Softmax { axis } => ops_norm::softmax_backward(node, p, g, *axis, store),
        OpKind::LogSoftmax { axis } => ops_norm::log_softmax_backward(node, p, g, *axis, store),
        OpKind::LayerNorm { eps } => ops_norm::layer_norm_backward(p, g, *eps, store),
        OpKind::InstanceNorm { eps } => ops_norm::instance_norm_backward(p, g, *eps, store),
        OpKind::Conv3d { stride, pad } => ops_conv::conv3d_backward(p, node.shape(), g, *stride, *pad, store),
        OpKind::ConvTranspose3d { stride, pad } => {
            ops_conv::conv_transpose3d_backward(p, node.shape(), g, *stride, *pad, store)
        }
        OpKind::MaxPool3d { argmax, .. } => ops_conv::max_pool3d_backward(p, g, argmax, store),
        OpKind::Reshape => store.add(&p[0], g),
        OpKind::Permute { axes } => ops_shape::permute_backward(p, node.shape(), g, axes, store),
        OpKind::Concat { axis } => ops_shape::concat_backward(p, node.shape(), g, *axis, store),
        OpKind::Slice { start, len } => ops_shape::slice_backward(p, g, start, len, store),
        OpKind::SumAll => {
            if p[0].is_tracked() {
                store.add_owned(&p[0], vec![g[0]; p[0].numel()]);
            }
        }
        OpKind::SumAxis { axis } => ops_reduce::sum_axis_backward(p, g, *axis, store),
        OpKind::ArgmaxAxis { .. } => {
            return Err(Error::autodiff(
                "argmax_axis is not differentiable; detach before calling backward",
            ));
        }
    }
    Ok(())
}
