//! 3D convolution, transposed convolution, and max pooling.
//!
//! Convolutions lower to GEMM through an im2col buffer built per chunk of
//! output (or input) voxels, so peak extra memory stays bounded regardless of
//! volume size. Chunks are processed sequentially in raster order, keeping
//! accumulation deterministic.

use super::autodiff::GradStore;
use super::op::OpKind;
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Per-buffer budget for im2col scratch space.
const CHUNK_BYTES: usize = 8 << 20;

fn chunk_len<E: Element>(row: usize, total: usize) -> usize {
    (CHUNK_BYTES / (row * E::DTYPE.byte_size()).max(1)).clamp(1, total.max(1))
}

fn decode3(v: usize, sp: [usize; 3]) -> [usize; 3] {
    [v / (sp[1] * sp[2]), v / sp[2] % sp[1], v % sp[2]]
}

struct ConvGeom {
    batch: usize,
    cin: usize,
    cout: usize,
    in_sp: [usize; 3],
    out_sp: [usize; 3],
    k: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    vin: usize,
    vout: usize,
    kvol: usize,
}

fn conv_geometry<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: &Tensor<E>,
    stride: [usize; 3],
    pad: [usize; 3],
    transposed: bool,
) -> Result<ConvGeom> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 5 || ws.len() != 5 {
        return Err(Error::shape(format!(
            "conv expects rank-5 input and weight, got {:?} and {:?}",
            xs, ws
        )));
    }
    if stride.iter().any(|&s| s == 0) {
        return Err(Error::shape("conv stride must be >= 1"));
    }
    // Weight layout: (out, in, k..) for conv, (in, out, k..) for transposed.
    let (w_in, w_out) = if transposed { (ws[0], ws[1]) } else { (ws[1], ws[0]) };
    if xs[1] != w_in {
        return Err(Error::shape(format!(
            "conv input has {} channels but weight expects {}",
            xs[1], w_in
        )));
    }
    if b.shape() != [w_out] {
        return Err(Error::shape(format!(
            "conv bias must have shape [{}], got {:?}",
            w_out,
            b.shape()
        )));
    }
    let in_sp = [xs[2], xs[3], xs[4]];
    let k = [ws[2], ws[3], ws[4]];
    let mut out_sp = [0usize; 3];
    for i in 0..3 {
        if transposed {
            let full = (in_sp[i] - 1) * stride[i] + k[i];
            if full < 2 * pad[i] + 1 {
                return Err(Error::shape(format!(
                    "transposed conv output collapses on axis {}: input {:?} kernel {:?} stride {:?} pad {:?}",
                    i, in_sp, k, stride, pad
                )));
            }
            out_sp[i] = full - 2 * pad[i];
        } else {
            if in_sp[i] + 2 * pad[i] < k[i] {
                return Err(Error::shape(format!(
                    "conv kernel {:?} exceeds padded input {:?} on axis {}",
                    k, in_sp, i
                )));
            }
            out_sp[i] = (in_sp[i] + 2 * pad[i] - k[i]) / stride[i] + 1;
        }
    }
    Ok(ConvGeom {
        batch: xs[0],
        cin: xs[1],
        cout: w_out,
        in_sp,
        out_sp,
        k,
        stride,
        pad,
        vin: in_sp.iter().product(),
        vout: out_sp.iter().product(),
        kvol: k.iter().product(),
    })
}

/// Fills `cols` (rows = voxels `v0..v0+ch`, columns = cin*kvol) with the
/// receptive field of each output voxel; out-of-bounds taps read as zero.
fn im2col<E: Element>(x: &[E], geom: &ConvGeom, v0: usize, ch: usize, cols: &mut [E]) {
    let [h, w, d] = geom.in_sp;
    let [k0, k1, k2] = geom.k;
    let [s0, s1, s2] = geom.stride;
    let [p0, p1, p2] = geom.pad;
    let cink = geom.cin * geom.kvol;
    for j in 0..ch {
        let [ho, wo, dof] = decode3(v0 + j, geom.out_sp);
        let hi0 = (ho * s0) as isize - p0 as isize;
        let wi0 = (wo * s1) as isize - p1 as isize;
        let di0 = (dof * s2) as isize - p2 as isize;
        let row = &mut cols[j * cink..(j + 1) * cink];
        let mut cik = 0usize;
        for ci in 0..geom.cin {
            for a in 0..k0 {
                let hi = hi0 + a as isize;
                if hi < 0 || hi >= h as isize {
                    row[cik..cik + k1 * k2].fill(E::ZERO);
                    cik += k1 * k2;
                    continue;
                }
                for bb in 0..k1 {
                    let wi = wi0 + bb as isize;
                    if wi < 0 || wi >= w as isize {
                        row[cik..cik + k2].fill(E::ZERO);
                        cik += k2;
                        continue;
                    }
                    // The depth taps are contiguous in x; split the run into
                    // the in-bounds span and zero fill on either side.
                    let lo = ((-di0).max(0) as usize).min(k2);
                    let hi_excl = ((d as isize - di0).clamp(0, k2 as isize) as usize).max(lo);
                    let base = ((ci * h + hi as usize) * w + wi as usize) * d;
                    row[cik..cik + lo].fill(E::ZERO);
                    if lo < hi_excl {
                        let src = base + (di0 + lo as isize) as usize;
                        row[cik + lo..cik + hi_excl].copy_from_slice(&x[src..src + (hi_excl - lo)]);
                    }
                    row[cik + hi_excl..cik + k2].fill(E::ZERO);
                    cik += k2;
                }
            }
        }
    }
}

/// Scatter-adds im2col-shaped cotangents back onto the input gradient.
fn col2im_add<E: Element>(dcols: &[E], geom: &ConvGeom, v0: usize, ch: usize, dx: &mut [E]) {
    let [h, w, d] = geom.in_sp;
    let [k0, k1, k2] = geom.k;
    let [s0, s1, s2] = geom.stride;
    let [p0, p1, p2] = geom.pad;
    for j in 0..ch {
        let [ho, wo, dof] = decode3(v0 + j, geom.out_sp);
        let hi0 = (ho * s0) as isize - p0 as isize;
        let wi0 = (wo * s1) as isize - p1 as isize;
        let di0 = (dof * s2) as isize - p2 as isize;
        let row = &dcols[j * geom.cin * geom.kvol..];
        let mut cik = 0usize;
        for ci in 0..geom.cin {
            for a in 0..k0 {
                let hi = hi0 + a as isize;
                if hi < 0 || hi >= h as isize {
                    cik += k1 * k2;
                    continue;
                }
                for bb in 0..k1 {
                    let wi = wi0 + bb as isize;
                    if wi < 0 || wi >= w as isize {
                        cik += k2;
                        continue;
                    }
                    let base = ((ci * h + hi as usize) * w + wi as usize) * d;
                    for c in 0..k2 {
                        let di = di0 + c as isize;
                        if di >= 0 && di < d as isize {
                            dx[base + di as usize] += row[cik + c];
                        }
                    }
                    cik += k2;
                }
            }
        }
    }
}

impl<E: Element> Tensor<E> {
    /// 3D convolution. `x` is (batch, in, H, W, D), `weight` is
    /// (out, in, k0, k1, k2), `bias` is (out).
    pub fn conv3d(
        &self,
        weight: &Tensor<E>,
        bias: &Tensor<E>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Tensor<E>> {
        let geom = conv_geometry(self, weight, bias, stride, pad, false)?;
        let cink = geom.cin * geom.kvol;
        let ch_max = chunk_len::<E>(cink, geom.vout);
        let mut out = vec![E::ZERO; geom.batch * geom.cout * geom.vout];
        let mut cols = vec![E::ZERO; ch_max * cink];
        let mut cbuf = vec![E::ZERO; geom.cout * ch_max];
        {
            let x = self.data();
            let w = weight.data();
            let b = bias.data();
            for bi in 0..geom.batch {
                let xoff = bi * geom.cin * geom.vin;
                let yoff = bi * geom.cout * geom.vout;
                let mut v0 = 0usize;
                while v0 < geom.vout {
                    let ch = ch_max.min(geom.vout - v0);
                    im2col(&x[xoff..], &geom, v0, ch, &mut cols);
                    E::gemm_strided(
                        geom.cout,
                        cink,
                        ch,
                        E::ONE,
                        &w,
                        cink,
                        1,
                        &cols,
                        1,
                        cink,
                        E::ZERO,
                        &mut cbuf,
                    );
                    for co in 0..geom.cout {
                        let dst = yoff + co * geom.vout + v0;
                        let bias_v = b[co];
                        for (o, s) in out[dst..dst + ch].iter_mut().zip(&cbuf[co * ch..]) {
                            *o = *s + bias_v;
                        }
                    }
                    v0 += ch;
                }
            }
        }
        let out_shape = vec![geom.batch, geom.cout, geom.out_sp[0], geom.out_sp[1], geom.out_sp[2]];
        Ok(Tensor::from_op(
            OpKind::Conv3d { stride, pad },
            vec![self.clone(), weight.clone(), bias.clone()],
            out,
            out_shape,
        ))
    }

    /// Transposed 3D convolution. `x` is (batch, in, H, W, D), `weight` is
    /// (in, out, k0, k1, k2), `bias` is (out). Output spatial extent is
    /// (H-1)*stride + k - 2*pad per axis.
    pub fn conv_transpose3d(
        &self,
        weight: &Tensor<E>,
        bias: &Tensor<E>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Tensor<E>> {
        let geom = conv_geometry(self, weight, bias, stride, pad, true)?;
        let coutk = geom.cout * geom.kvol;
        let ch_max = chunk_len::<E>(coutk, geom.vin);
        let mut out = vec![E::ZERO; geom.batch * geom.cout * geom.vout];
        let mut ycols = vec![E::ZERO; coutk * ch_max];
        {
            let x = self.data();
            let w = weight.data();
            let b = bias.data();
            for bi in 0..geom.batch {
                let xoff = bi * geom.cin * geom.vin;
                let yoff = bi * geom.cout * geom.vout;
                for co in 0..geom.cout {
                    out[yoff + co * geom.vout..yoff + (co + 1) * geom.vout].fill(b[co]);
                }
                let mut u0 = 0usize;
                while u0 < geom.vin {
                    let ch = ch_max.min(geom.vin - u0);
                    // ycols = W^T (coutk x cin) @ X chunk (cin x ch)
                    E::gemm_strided(
                        coutk,
                        geom.cin,
                        ch,
                        E::ONE,
                        &w,
                        1,
                        coutk,
                        &x[xoff + u0..],
                        geom.vin,
                        1,
                        E::ZERO,
                        &mut ycols,
                    );
                    scatter_transposed(&ycols, &geom, u0, ch, &mut out[yoff..yoff + geom.cout * geom.vout]);
                    u0 += ch;
                }
            }
        }
        let out_shape = vec![geom.batch, geom.cout, geom.out_sp[0], geom.out_sp[1], geom.out_sp[2]];
        Ok(Tensor::from_op(
            OpKind::ConvTranspose3d { stride, pad },
            vec![self.clone(), weight.clone(), bias.clone()],
            out,
            out_shape,
        ))
    }

    /// Max pooling over non-overlapping or strided windows, no padding.
    pub fn max_pool3d(&self, kernel: [usize; 3], stride: [usize; 3]) -> Result<Tensor<E>> {
        let xs = self.shape();
        if xs.len() != 5 {
            return Err(Error::shape(format!("max_pool3d expects rank-5 input, got {:?}", xs)));
        }
        if stride.iter().any(|&s| s == 0) || kernel.iter().any(|&k| k == 0) {
            return Err(Error::shape("max_pool3d kernel and stride must be >= 1"));
        }
        let in_sp = [xs[2], xs[3], xs[4]];
        let mut out_sp = [0usize; 3];
        for i in 0..3 {
            if in_sp[i] < kernel[i] {
                return Err(Error::shape(format!(
                    "max_pool3d kernel {:?} exceeds input {:?}",
                    kernel, in_sp
                )));
            }
            out_sp[i] = (in_sp[i] - kernel[i]) / stride[i] + 1;
        }
        let (batch, chans) = (xs[0], xs[1]);
        let vin: usize = in_sp.iter().product();
        let vout: usize = out_sp.iter().product();
        let mut out = vec![E::ZERO; batch * chans * vout];
        let mut argmax = vec![0usize; out.len()];
        {
            let x = self.data();
            for bc in 0..batch * chans {
                let xoff = bc * vin;
                let ooff = bc * vout;
                for v in 0..vout {
                    let [ho, wo, dof] = decode3(v, out_sp);
                    let (h0, w0, d0) = (ho * stride[0], wo * stride[1], dof * stride[2]);
                    let mut best_idx = xoff + (h0 * in_sp[1] + w0) * in_sp[2] + d0;
                    let mut best = x[best_idx];
                    for a in 0..kernel[0] {
                        for bb in 0..kernel[1] {
                            let base = xoff + ((h0 + a) * in_sp[1] + w0 + bb) * in_sp[2] + d0;
                            for c in 0..kernel[2] {
                                let v = x[base + c];
                                if v > best {
                                    best = v;
                                    best_idx = base + c;
                                }
                            }
                        }
                    }
                    out[ooff + v] = best;
                    argmax[ooff + v] = best_idx;
                }
            }
        }
        let out_shape = vec![batch, chans, out_sp[0], out_sp[1], out_sp[2]];
        Ok(Tensor::from_op(
            OpKind::MaxPool3d { kernel, stride, argmax },
            vec![self.clone()],
            out,
            out_shape,
        ))
    }
}

/// Adds each (cout, kernel-tap) row of `ycols` onto the output voxels the
/// input chunk strides onto; taps falling outside the output (pad) are dropped.
fn scatter_transposed<E: Element>(ycols: &[E], geom: &ConvGeom, u0: usize, ch: usize, y: &mut [E]) {
    let [oh, ow, od] = geom.out_sp;
    let [_, k1, k2] = geom.k;
    for cok in 0..geom.cout * geom.kvol {
        let co = cok / geom.kvol;
        let kidx = cok % geom.kvol;
        let (a, bb, c) = (kidx / (k1 * k2), kidx / k2 % k1, kidx % k2);
        let row = &ycols[cok * ch..(cok + 1) * ch];
        for (j, val) in row.iter().enumerate() {
            let [hi, wi, di] = decode3(u0 + j, geom.in_sp);
            let ho = (hi * geom.stride[0] + a) as isize - geom.pad[0] as isize;
            let wo = (wi * geom.stride[1] + bb) as isize - geom.pad[1] as isize;
            let dof = (di * geom.stride[2] + c) as isize - geom.pad[2] as isize;
            if ho < 0 || ho >= oh as isize || wo < 0 || wo >= ow as isize || dof < 0 || dof >= od as isize {
                continue;
            }
            y[co * geom.vout + ((ho as usize * ow) + wo as usize) * od + dof as usize] += *val;
        }
    }
}

/// Gathers output cotangents into im2col layout for the transposed conv:
/// gcols[(cok, j)] = g at the voxel that input voxel u0+j writes through tap k.
fn gather_transposed<E: Element>(g: &[E], geom: &ConvGeom, u0: usize, ch: usize, gcols: &mut [E]) {
    let [oh, ow, od] = geom.out_sp;
    let [_, k1, k2] = geom.k;
    for cok in 0..geom.cout * geom.kvol {
        let co = cok / geom.kvol;
        let kidx = cok % geom.kvol;
        let (a, bb, c) = (kidx / (k1 * k2), kidx / k2 % k1, kidx % k2);
        let row = &mut gcols[cok * ch..(cok + 1) * ch];
        for (j, slot) in row.iter_mut().enumerate() {
            let [hi, wi, di] = decode3(u0 + j, geom.in_sp);
            let ho = (hi * geom.stride[0] + a) as isize - geom.pad[0] as isize;
            let wo = (wi * geom.stride[1] + bb) as isize - geom.pad[1] as isize;
            let dof = (di * geom.stride[2] + c) as isize - geom.pad[2] as isize;
            *slot = if ho < 0 || ho >= oh as isize || wo < 0 || wo >= ow as isize || dof < 0 || dof >= od as isize {
                E::ZERO
            } else {
                g[co * geom.vout + ((ho as usize * ow) + wo as usize) * od + dof as usize]
            };
        }
    }
}

pub(crate) fn conv3d_backward<E: Element>(
    p: &[Tensor<E>],
    _node_shape: &[usize],
    g: &[E],
    stride: [usize; 3],
    pad: [usize; 3],
    store: &mut GradStore<E>,
) {
    let geom = conv_geometry(&p[0], &p[1], &p[2], stride, pad, false).expect("validated in forward");
    let cink = geom.cin * geom.kvol;
    let ch_max = chunk_len::<E>(cink, geom.vout);

    if p[2].is_tracked() {
        let db = store.buf(&p[2]).expect("tracked");
        for bi in 0..geom.batch {
            for co in 0..geom.cout {
                let base = (bi * geom.cout + co) * geom.vout;
                let mut acc = E::ZERO;
                for v in 0..geom.vout {
                    acc += g[base + v];
                }
                db[co] += acc;
            }
        }
    }

    let need_dw = p[1].is_tracked();
    let need_dx = p[0].is_tracked();
    if !need_dw && !need_dx {
        return;
    }
    let x = p[0].data();
    let w = p[1].data();
    let mut cols = vec![E::ZERO; ch_max * cink];
    let mut dcols = vec![E::ZERO; cink * ch_max];
    // Accumulate into local buffers so the store borrows stay short.
    let mut dw = need_dw.then(|| vec![E::ZERO; p[1].numel()]);
    let mut dx = need_dx.then(|| vec![E::ZERO; p[0].numel()]);
    for bi in 0..geom.batch {
        let xoff = bi * geom.cin * geom.vin;
        let goff = bi * geom.cout * geom.vout;
        let mut v0 = 0usize;
        while v0 < geom.vout {
            let ch = ch_max.min(geom.vout - v0);
            if let Some(dw) = dw.as_mut() {
                im2col(&x[xoff..], &geom, v0, ch, &mut cols);
                // dW += g chunk (cout x ch) @ cols (ch x cink)
                E::gemm_strided(
                    geom.cout,
                    ch,
                    cink,
                    E::ONE,
                    &g[goff + v0..],
                    geom.vout,
                    1,
                    &cols,
                    cink,
                    1,
                    E::ONE,
                    dw,
                );
            }
            if let Some(dx) = dx.as_mut() {
                // dcols = g chunk^T (ch x cout) @ W (cout x cink), already in
                // the voxel-major layout col2im_add consumes.
                E::gemm_strided(
                    ch,
                    geom.cout,
                    cink,
                    E::ONE,
                    &g[goff + v0..],
                    1,
                    geom.vout,
                    &w,
                    cink,
                    1,
                    E::ZERO,
                    &mut dcols,
                );
                col2im_add(&dcols, &geom, v0, ch, &mut dx[xoff..xoff + geom.cin * geom.vin]);
            }
            v0 += ch;
        }
    }
    drop(x);
    drop(w);
    if let Some(dw) = dw {
        store.add_owned(&p[1], dw);
    }
    if let Some(dx) = dx {
        store.add_owned(&p[0], dx);
    }
}

pub(crate) fn conv_transpose3d_backward<E: Element>(
    p: &[Tensor<E>],
    _node_shape: &[usize],
    g: &[E],
    stride: [usize; 3],
    pad: [usize; 3],
    store: &mut GradStore<E>,
) {
    let geom = conv_geometry(&p[0], &p[1], &p[2], stride, pad, true).expect("validated in forward");
    let coutk = geom.cout * geom.kvol;
    let ch_max = chunk_len::<E>(coutk, geom.vin);

    if p[2].is_tracked() {
        let db = store.buf(&p[2]).expect("tracked");
        for bi in 0..geom.batch {
            for co in 0..geom.cout {
                let base = (bi * geom.cout + co) * geom.vout;
                let mut acc = E::ZERO;
                for v in 0..geom.vout {
                    acc += g[base + v];
                }
                db[co] += acc;
            }
        }
    }

    let need_dw = p[1].is_tracked();
    let need_dx = p[0].is_tracked();
    if !need_dw && !need_dx {
        return;
    }
    let x = p[0].data();
    let w = p[1].data();
    let mut gcols = vec![E::ZERO; coutk * ch_max];
    let mut dxchunk = vec![E::ZERO; geom.cin * ch_max];
    let mut dw = need_dw.then(|| vec![E::ZERO; p[1].numel()]);
    let mut dx = need_dx.then(|| vec![E::ZERO; p[0].numel()]);
    for bi in 0..geom.batch {
        let xoff = bi * geom.cin * geom.vin;
        let goff = bi * geom.cout * geom.vout;
        let mut u0 = 0usize;
        while u0 < geom.vin {
            let ch = ch_max.min(geom.vin - u0);
            gather_transposed(&g[goff..goff + geom.cout * geom.vout], &geom, u0, ch, &mut gcols);
            if let Some(dx) = dx.as_mut() {
                // dX chunk = W (cin x coutk) @ gcols (coutk x ch)
                E::gemm_strided(
                    geom.cin,
                    coutk,
                    ch,
                    E::ONE,
                    &w,
                    coutk,
                    1,
                    &gcols,
                    ch,
                    1,
                    E::ZERO,
                    &mut dxchunk,
                );
                for ci in 0..geom.cin {
                    let dst = xoff + ci * geom.vin + u0;
                    for j in 0..ch {
                        dx[dst + j] += dxchunk[ci * ch + j];
                    }
                }
            }
            if let Some(dw) = dw.as_mut() {
                // dW += X chunk (cin x ch) @ gcols^T (ch x coutk)
                E::gemm_strided(
                    geom.cin,
                    ch,
                    coutk,
                    E::ONE,
                    &x[xoff + u0..],
                    geom.vin,
                    1,
                    &gcols,
                    1,
                    ch,
                    E::ONE,
                    dw,
                );
            }
            u0 += ch;
        }
    }
    drop(x);
    drop(w);
    if let Some(dw) = dw {
        store.add_owned(&p[1], dw);
    }
    if let Some(dx) = dx {
        store.add_owned(&p[0], dx);
    }
}

pub(crate) fn max_pool3d_backward<E: Element>(p: &[Tensor<E>], g: &[E], argmax: &[usize], store: &mut GradStore<E>) {
    if let Some(dx) = store.buf(&p[0]) {
        for (gv, &src) in g.iter().zip(argmax) {
            dx[src] += *gv;
        }
    }
}
