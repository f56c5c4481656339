//! Hierarchical 3D transformer encoder with block aggregation.
//!
//! The volume is embedded into non-overlapping patches, then processed by a
//! stack of hierarchies. Each hierarchy splits its token grid into a g^3
//! grid of blocks, runs shared-weight transformer layers independently per
//! block, and hands the reassembled volume to an aggregation step (3^3 conv
//! doubling channels, then 2^3 max-pool) that halves resolution and merges
//! neighboring blocks. The block grid shrinks as 2^(levels-1-level), so the
//! last hierarchy attends over a single global block.

use crate::error::{Error, Result};
use crate::params::ParamBuilder;
use crate::tensor::{Element, Tensor};

/// Epsilon inside every LayerNorm denominator.
pub const LN_EPS: f64 = 1e-5;

/// Splits a feature volume (B, C, H, W, D) into a g x g x g grid of blocks
/// and flattens each block into a token row: output is (B, T, n, C) with
/// T = g^3 blocks and n = (H/g)(W/g)(D/g) tokens per block. Blocks and the
/// tokens within them are ordered row-major with depth fastest.
pub fn blockify<E: Element>(x: &Tensor<E>, g: usize) -> Result<Tensor<E>> {
    let sh = x.shape().to_vec();
    if sh.len() != 5 {
        return Err(Error::shape(format!("blockify expects a rank-5 volume, got {sh:?}")));
    }
    if g == 0 {
        return Err(Error::shape("block grid must be at least 1"));
    }
    let (b, c) = (sh[0], sh[1]);
    let e: Vec<usize> = sh[2..]
        .iter()
        .map(|&s| {
            if s == 0 || s % g != 0 {
                Err(Error::shape(format!(
                    "spatial extents {}x{}x{} are not divisible by block grid {g}",
                    sh[2], sh[3], sh[4]
                )))
            } else {
                Ok(s / g)
            }
        })
        .collect::<Result<_>>()?;
    x.reshape(&[b, c, g, e[0], g, e[1], g, e[2]])?
        .permute(&[0, 2, 4, 6, 3, 5, 7, 1])?
        .reshape(&[b, g * g * g, e[0] * e[1] * e[2], c])
}

/// Inverse of [`blockify`]: reassembles (B, T, n, C) into (B, C, H, W, D)
/// for the given spatial extents. Bitwise inverse for matching arguments.
pub fn unblockify<E: Element>(seq: &Tensor<E>, g: usize, spatial: [usize; 3]) -> Result<Tensor<E>> {
    let sh = seq.shape().to_vec();
    if sh.len() != 4 {
        return Err(Error::shape(format!("unblockify expects a rank-4 sequence, got {sh:?}")));
    }
    if g == 0 {
        return Err(Error::shape("block grid must be at least 1"));
    }
    if sh[1] != g * g * g {
        return Err(Error::shape(format!(
            "sequence has {} blocks but block grid {g} implies {}",
            sh[1],
            g * g * g
        )));
    }
    let e: Vec<usize> = spatial
        .iter()
        .map(|&s| {
            if s == 0 || s % g != 0 {
                Err(Error::shape(format!(
                    "spatial extents {}x{}x{} are not divisible by block grid {g}",
                    spatial[0], spatial[1], spatial[2]
                )))
            } else {
                Ok(s / g)
            }
        })
        .collect::<Result<_>>()?;
    if sh[2] != e[0] * e[1] * e[2] {
        return Err(Error::shape(format!(
            "sequence has {} tokens per block but extents {spatial:?} with grid {g} imply {}",
            sh[2],
            e[0] * e[1] * e[2]
        )));
    }
    let (b, c) = (sh[0], sh[3]);
    seq.reshape(&[b, g, g, g, e[0], e[1], e[2], c])?
        .permute(&[0, 7, 1, 4, 2, 5, 3, 6])?
        .reshape(&[b, c, spatial[0], spatial[1], spatial[2]])
}

/// Projects non-overlapping patch^3 cubes of (B, C_in, H, W, D) to embedding
/// channels: output is (B, C_0, H/patch, W/patch, D/patch). The weight is
/// (C_in * patch^3, C_0) over patch contents flattened channel-major.
pub fn patch_embed<E: Element>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
    patch: usize,
) -> Result<Tensor<E>> {
    let sh = x.shape().to_vec();
    if sh.len() != 5 {
        return Err(Error::shape(format!("patch_embed expects a rank-5 volume, got {sh:?}")));
    }
    if patch == 0 {
        return Err(Error::shape("patch size must be at least 1"));
    }
    let (b, c) = (sh[0], sh[1]);
    if sh[2..].iter().any(|&s| s == 0 || s % patch != 0) {
        return Err(Error::shape(format!(
            "spatial extents {}x{}x{} are not divisible by patch size {patch}",
            sh[2], sh[3], sh[4]
        )));
    }
    let flat = c * patch * patch * patch;
    if weight.shape().len() != 2 || weight.shape()[0] != flat {
        return Err(Error::shape(format!(
            "patch weight must be ({flat}, channels) for {c} input channels and patch {patch}, got {:?}",
            weight.shape()
        )));
    }
    let c0 = weight.shape()[1];
    let t: Vec<usize> = sh[2..].iter().map(|&s| s / patch).collect();
    x.reshape(&[b, c, t[0], patch, t[1], patch, t[2], patch])?
        .permute(&[0, 2, 4, 6, 1, 3, 5, 7])?
        .reshape(&[b, t[0] * t[1] * t[2], flat])?
        .matmul(weight)?
        .bias_add(bias)?
        .reshape(&[b, t[0], t[1], t[2], c0])?
        .permute(&[0, 4, 1, 2, 3])
}

/// Pre-norm transformer layer over (B, T, n, C): multi-head self-attention
/// within each block, then a GELU MLP, each behind a residual. One weight
/// set serves every block.
pub struct TransformerLayer<E: Element> {
    ln1_scale: Tensor<E>,
    ln1_shift: Tensor<E>,
    qkv_w: Tensor<E>,
    qkv_b: Tensor<E>,
    proj_w: Tensor<E>,
    proj_b: Tensor<E>,
    ln2_scale: Tensor<E>,
    ln2_shift: Tensor<E>,
    fc1_w: Tensor<E>,
    fc1_b: Tensor<E>,
    fc2_w: Tensor<E>,
    fc2_b: Tensor<E>,
    heads: usize,
    width: usize,
}

impl<E: Element> TransformerLayer<E> {
    pub fn new(
        pb: &mut ParamBuilder<E>,
        prefix: &str,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::config(format!("width {width} is not divisible by {heads} heads")));
        }
        let hidden = width * mlp_ratio;
        Ok(TransformerLayer {
            ln1_scale: pb.ones(format!("{prefix}.ln1.scale"), &[width])?,
            ln1_shift: pb.zeros(format!("{prefix}.ln1.shift"), &[width])?,
            qkv_w: pb.trunc_normal(format!("{prefix}.qkv.weight"), &[width, 3 * width], 0.02)?,
            qkv_b: pb.zeros(format!("{prefix}.qkv.bias"), &[3 * width])?,
            proj_w: pb.trunc_normal(format!("{prefix}.proj.weight"), &[width, width], 0.02)?,
            proj_b: pb.zeros(format!("{prefix}.proj.bias"), &[width])?,
            ln2_scale: pb.ones(format!("{prefix}.ln2.scale"), &[width])?,
            ln2_shift: pb.zeros(format!("{prefix}.ln2.shift"), &[width])?,
            fc1_w: pb.trunc_normal(format!("{prefix}.mlp.fc1.weight"), &[width, hidden], 0.02)?,
            fc1_b: pb.zeros(format!("{prefix}.mlp.fc1.bias"), &[hidden])?,
            fc2_w: pb.trunc_normal(format!("{prefix}.mlp.fc2.weight"), &[hidden, width], 0.02)?,
            fc2_b: pb.zeros(format!("{prefix}.mlp.fc2.bias"), &[width])?,
            heads,
            width,
        })
    }

    /// Attention probabilities and the per-head value rows, both
    /// (B, T, heads, n, *). Split out so tests can inspect the weights the
    /// forward pass actually uses.
    fn attention_and_values(&self, x: &Tensor<E>) -> Result<(Tensor<E>, Tensor<E>)> {
        let sh = x.shape().to_vec();
        let (b, t, n, c) = (sh[0], sh[1], sh[2], sh[3]);
        let (h, s) = (self.heads, self.width / self.heads);
        let qkv = x
            .layer_norm(&self.ln1_scale, &self.ln1_shift, E::from_f64(LN_EPS))?
            .matmul(&self.qkv_w)?
            .bias_add(&self.qkv_b)?;
        let split = |off: usize| -> Result<Tensor<E>> {
            qkv.slice(&[0, 0, 0, off], &[b, t, n, c])?
                .reshape(&[b, t, n, h, s])?
                .permute(&[0, 1, 3, 2, 4])
        };
        let q = split(0)?;
        let kt = split(c)?.permute(&[0, 1, 2, 4, 3])?;
        let v = split(2 * c)?;
        let scale = E::from_f64(1.0 / (s as f64).sqrt());
        let attn = q.matmul(&kt)?.mul_scalar(scale).softmax(4)?;
        Ok((attn, v))
    }

    /// Attention probabilities (B, T, heads, n, n); each row is a convex
    /// weighting of the block's tokens.
    pub fn attention(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        self.check_input(x)?;
        Ok(self.attention_and_values(x)?.0)
    }

    fn check_input(&self, x: &Tensor<E>) -> Result<()> {
        let sh = x.shape();
        if sh.len() != 4 || sh[3] != self.width {
            return Err(Error::shape(format!(
                "transformer layer expects (batch, blocks, tokens, {}), got {sh:?}",
                self.width
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        self.check_input(x)?;
        let sh = x.shape().to_vec();
        let (b, t, n, c) = (sh[0], sh[1], sh[2], sh[3]);
        let (attn, v) = self.attention_and_values(x)?;
        let mixed = attn
            .matmul(&v)?
            .permute(&[0, 1, 3, 2, 4])?
            .reshape(&[b, t, n, c])?
            .matmul(&self.proj_w)?
            .bias_add(&self.proj_b)?;
        let x = x.add(&mixed)?;
        let m = x
            .layer_norm(&self.ln2_scale, &self.ln2_shift, E::from_f64(LN_EPS))?
            .matmul(&self.fc1_w)?
            .bias_add(&self.fc1_b)?
            .gelu()
            .matmul(&self.fc2_w)?
            .bias_add(&self.fc2_b)?;
        x.add(&m)
    }
}

/// Aggregation between hierarchies: 3^3 conv doubling channels (stride 1,
/// pad 1) followed by 2^3 max-pool with stride 2.
pub struct Aggregate<E: Element> {
    w: Tensor<E>,
    b: Tensor<E>,
}

impl<E: Element> Aggregate<E> {
    pub fn new(pb: &mut ParamBuilder<E>, prefix: &str, cin: usize) -> Result<Self> {
        Ok(Aggregate {
            w: pb.he_uniform(format!("{prefix}.conv.weight"), &[2 * cin, cin, 3, 3, 3], cin * 27)?,
            b: pb.zeros(format!("{prefix}.conv.bias"), &[2 * cin])?,
        })
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        x.conv3d(&self.w, &self.b, [1; 3], [1; 3])?.max_pool3d([2; 3], [2; 3])
    }
}

/// One hierarchy: blockify, add the learned positional embedding once, run
/// the layer stack, reassemble.
pub struct Hierarchy<E: Element> {
    pub g: usize,
    pub width: usize,
    pub posemb: Tensor<E>,
    pub layers: Vec<TransformerLayer<E>>,
}

impl<E: Element> Hierarchy<E> {
    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let sh = x.shape();
        if sh.len() != 5 {
            return Err(Error::shape(format!("hierarchy expects a rank-5 volume, got {sh:?}")));
        }
        let spatial = [sh[2], sh[3], sh[4]];
        let seq = blockify(x, self.g)?;
        if seq.shape()[1..] != *self.posemb.shape() {
            return Err(Error::shape(format!(
                "token geometry {:?} does not match the positional embedding {:?}; \
                 inputs must use the window the model was built for",
                &seq.shape()[1..],
                self.posemb.shape()
            )));
        }
        let mut seq = seq.bias_add(&self.posemb)?;
        for layer in &self.layers {
            seq = layer.forward(&seq)?;
        }
        unblockify(&seq, self.g, spatial)
    }
}

/// Hierarchy outputs at their native resolutions, coarsest last, plus the
/// final output after the closing channel LayerNorm. `skips` holds every
/// hierarchy except the last; the decoder concatenates them back in.
pub struct EncoderOutput<E: Element> {
    pub skips: Vec<Tensor<E>>,
    pub output: Tensor<E>,
}

pub struct NestEncoder<E: Element> {
    pub patch: usize,
    embed_w: Tensor<E>,
    embed_b: Tensor<E>,
    pub hierarchies: Vec<Hierarchy<E>>,
    aggregates: Vec<Aggregate<E>>,
    norm_scale: Tensor<E>,
    norm_shift: Tensor<E>,
}

impl<E: Element> NestEncoder<E> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder<E>,
        in_channels: usize,
        patch: usize,
        window: [usize; 3],
        depths: &[usize],
        heads: &[usize],
        widths: &[usize],
        mlp_ratio: usize,
        block_aggregation: bool,
    ) -> Result<Self> {
        let levels = depths.len();
        if levels == 0 || heads.len() != levels || widths.len() != levels {
            return Err(Error::config(format!(
                "depths, heads, and widths must have equal nonzero length, got {}/{}/{}",
                depths.len(),
                heads.len(),
                widths.len()
            )));
        }
        if patch == 0 || window.iter().any(|&w| w == 0 || w % patch != 0) {
            return Err(Error::config(format!(
                "window {window:?} is not divisible by patch size {patch}"
            )));
        }
        for l in 0..levels.saturating_sub(1) {
            if widths[l + 1] != 2 * widths[l] {
                return Err(Error::config(format!(
                    "aggregation doubles channels, so widths must double per hierarchy, got {widths:?}"
                )));
            }
        }
        let grid: Vec<usize> = window.iter().map(|&w| w / patch).collect();
        let embed_w = pb.trunc_normal(
            "encoder.embed.weight",
            &[in_channels * patch * patch * patch, widths[0]],
            0.02,
        )?;
        let embed_b = pb.zeros("encoder.embed.bias", &[widths[0]])?;
        let mut hierarchies = Vec::with_capacity(levels);
        let mut aggregates = Vec::new();
        for l in 0..levels {
            let g = if block_aggregation { 1 << (levels - 1 - l) } else { 1 };
            let halve = 1 << l;
            let mut e = [0usize; 3];
            for (ei, &t) in e.iter_mut().zip(&grid) {
                if t % (halve * g) != 0 {
                    return Err(Error::config(format!(
                        "token grid {grid:?} cannot host hierarchy {l}: extent {t} is not \
                         divisible by {} (downsampling {halve} times block grid {g})",
                        halve * g
                    )));
                }
                *ei = t / halve / g;
            }
            let posemb = pb.trunc_normal(
                format!("encoder.h{l}.posemb"),
                &[g * g * g, e[0] * e[1] * e[2], widths[l]],
                0.02,
            )?;
            let mut layers = Vec::with_capacity(depths[l]);
            for i in 0..depths[l] {
                layers.push(TransformerLayer::new(
                    pb,
                    &format!("encoder.h{l}.layer{i}"),
                    widths[l],
                    heads[l],
                    mlp_ratio,
                )?);
            }
            hierarchies.push(Hierarchy { g, width: widths[l], posemb, layers });
            if l + 1 < levels {
                aggregates.push(Aggregate::new(pb, &format!("encoder.agg{l}"), widths[l])?);
            }
        }
        let norm_scale = pb.ones("encoder.norm.scale", &[widths[levels - 1]])?;
        let norm_shift = pb.zeros("encoder.norm.shift", &[widths[levels - 1]])?;
        Ok(NestEncoder {
            patch,
            embed_w,
            embed_b,
            hierarchies,
            aggregates,
            norm_scale,
            norm_shift,
        })
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<EncoderOutput<E>> {
        let mut v = patch_embed(x, &self.embed_w, &self.embed_b, self.patch)?;
        let mut skips = Vec::new();
        for (l, hier) in self.hierarchies.iter().enumerate() {
            v = hier.forward(&v)?;
            if l + 1 < self.hierarchies.len() {
                skips.push(v.clone());
                v = self.aggregates[l].forward(&v)?;
            }
        }
        let output = v
            .permute(&[0, 2, 3, 4, 1])?
            .layer_norm(&self.norm_scale, &self.norm_shift, E::from_f64(LN_EPS))?
            .permute(&[0, 4, 1, 2, 3])?;
        Ok(EncoderOutput { skips, output })
    }
}
