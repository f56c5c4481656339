//! Sliding-window whole-volume inference with uniform blending, multi-model
//! ensembling, and label-map extraction. Forward passes record no autodiff
//! graph; fusion accumulates in raster order so results are independent of
//! the thread count.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{no_grad, Element, Tensor};
use crate::volume::{Volume, VolumeKind};

/// Every start a sliding window takes along one axis: 0, s, 2s, ... with
/// s = round(window * (1 - overlap)), the final start clamped to
/// extent - window. Starts are strictly increasing and cover the axis.
pub fn window_starts(extent: usize, window: usize, overlap: f64) -> Result<Vec<usize>> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::config(format!("overlap must be in [0, 1), got {overlap}")));
    }
    if window == 0 || window > extent {
        return Err(Error::config(format!("window {window} does not fit extent {extent}")));
    }
    let stride = ((window as f64 * (1.0 - overlap)).round() as usize).max(1);
    let last = extent - window;
    let mut starts = Vec::new();
    for k in 0.. {
        let pos = k * stride;
        if pos >= last {
            starts.push(last);
            break;
        }
        starts.push(pos);
    }
    Ok(starts)
}

/// Pad amounts (lo, hi) per axis to bring `extent` up to `window`, split
/// evenly with the extra voxel on the high side.
fn pad_split(extent: usize, window: usize) -> (usize, usize) {
    let d = window.saturating_sub(extent);
    (d / 2, d - d / 2)
}

/// Edge-value padding: voxel (i,j,k) of the result reads the nearest voxel
/// of the source.
fn pad_to_window(v: &Volume, window: [usize; 3]) -> Volume {
    if (0..3).all(|a| v.extents[a] >= window[a]) {
        return v.clone();
    }
    let e = v.extents;
    let ext: Vec<usize> = (0..3).map(|a| e[a].max(window[a])).collect();
    let lo: Vec<usize> = (0..3).map(|a| pad_split(e[a], window[a]).0).collect();
    let mut data = Vec::with_capacity(ext.iter().product());
    for i in 0..ext[0] {
        for j in 0..ext[1] {
            for k in 0..ext[2] {
                let src = [i, j, k]
                    .iter()
                    .zip(&lo)
                    .zip(&e)
                    .map(|((&x, &l), &n)| x.saturating_sub(l).min(n - 1))
                    .collect::<Vec<_>>();
                data.push(v.at(src[0], src[1], src[2]));
            }
        }
    }
    Volume {
        extents: [ext[0], ext[1], ext[2]],
        spacing: v.spacing,
        kind: v.kind,
        data,
    }
}

/// Class probabilities (K, H, W, D) for a whole volume: tile with the model
/// window at the given overlap, softmax each window's logits, and average
/// per voxel over all covering windows. Volumes smaller than the window are
/// edge-padded symmetrically and the result cropped back.
pub fn sliding_window<E: Element>(
    model: &Model<E>,
    volume: &Volume,
    overlap: f64,
    threads: usize,
) -> Result<Tensor<E>> {
    if threads == 0 {
        return Err(Error::config("thread count must be positive"));
    }
    if model.config.in_channels != 1 {
        return Err(Error::config(format!(
            "volume pipeline feeds a single channel, model expects {}",
            model.config.in_channels
        )));
    }
    let window = model.config.window;
    let padded = pad_to_window(volume, window);
    let e = padded.extents;
    let starts: Vec<Vec<usize>> = (0..3)
        .map(|a| window_starts(e[a], window[a], overlap))
        .collect::<Result<_>>()?;

    let mut corners = Vec::new();
    for &i in &starts[0] {
        for &j in &starts[1] {
            for &k in &starts[2] {
                corners.push([i, j, k]);
            }
        }
    }

    let classes = model.config.classes;
    let wvox: usize = window.iter().product();
    let forward = |corner: [usize; 3]| -> Result<Vec<E>> {
        let mut pixels = Vec::with_capacity(wvox);
        for i in 0..window[0] {
            for j in 0..window[1] {
                for k in 0..window[2] {
                    pixels.push(E::from_f64(padded.at(corner[0] + i, corner[1] + j, corner[2] + k)));
                }
            }
        }
        let input = Tensor::from_vec(pixels, &[1, 1, window[0], window[1], window[2]])?;
        let probs = no_grad(|| -> Result<Tensor<E>> {
            Ok(model.forward(&input)?.reshape(&[classes, wvox])?.softmax(0)?)
        })?;
        Ok(probs.to_vec())
    };

    // Window outputs, indexed like `corners`. Threads split the corner list
    // round-robin; the merge below always runs in raster order.
    let mut outputs: Vec<Option<Vec<E>>> = vec![None; corners.len()];
    if threads == 1 || corners.len() == 1 {
        for (slot, &c) in outputs.iter_mut().zip(&corners) {
            *slot = Some(forward(c)?);
        }
    } else {
        let results: Vec<(usize, Result<Vec<E>>)> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads.min(corners.len()))
                .map(|t| {
                    let corners = &corners;
                    let forward = &forward;
                    scope.spawn(move || {
                        corners
                            .iter()
                            .enumerate()
                            .skip(t)
                            .step_by(threads)
                            .map(|(i, &c)| (i, forward(c)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("window worker panicked")).collect()
        });
        for (i, r) in results {
            outputs[i] = Some(r?);
        }
    }

    let nvox: usize = e.iter().product();
    let mut sum = vec![E::ZERO; classes * nvox];
    let mut cover = vec![0u32; nvox];
    for (out, corner) in outputs.iter().zip(&corners) {
        let out = out.as_ref().expect("every window computed");
        for i in 0..window[0] {
            for j in 0..window[1] {
                for k in 0..window[2] {
                    let v = ((corner[0] + i) * e[1] + corner[1] + j) * e[2] + corner[2] + k;
                    let w = (i * window[1] + j) * window[2] + k;
                    cover[v] += 1;
                    for c in 0..classes {
                        sum[c * nvox + v] += out[c * wvox + w];
                    }
                }
            }
        }
    }
    for v in 0..nvox {
        let inv = E::ONE / E::from_f64(cover[v] as f64);
        for c in 0..classes {
            sum[c * nvox + v] *= inv;
        }
    }

    // Crop padding back off.
    let orig = volume.extents;
    let lo: Vec<usize> = (0..3).map(|a| pad_split(orig[a], window[a]).0).collect();
    if orig != e {
        let ovox: usize = orig.iter().product();
        let mut cropped = vec![E::ZERO; classes * ovox];
        for c in 0..classes {
            for i in 0..orig[0] {
                for j in 0..orig[1] {
                    for k in 0..orig[2] {
                        let src = ((i + lo[0]) * e[1] + j + lo[1]) * e[2] + k + lo[2];
                        cropped[((c * orig[0] + i) * orig[1] + j) * orig[2] + k] = sum[c * nvox + src];
                    }
                }
            }
        }
        return Tensor::from_vec(cropped, &[classes, orig[0], orig[1], orig[2]]);
    }
    Tensor::from_vec(sum, &[classes, orig[0], orig[1], orig[2]])
}

/// Voxelwise arithmetic mean of probability maps from independently trained
/// models, accumulated as the first map plus the mean deviation from it so
/// that an ensemble of identical maps returns the map bit for bit.
pub fn ensemble<E: Element>(maps: &[Tensor<E>]) -> Result<Tensor<E>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::config("ensemble of zero probability maps"))?;
    for m in &maps[1..] {
        if m.shape() != first.shape() {
            return Err(Error::shape(format!(
                "ensemble shape mismatch: {:?} vs {:?}",
                m.shape(),
                first.shape()
            )));
        }
    }
    if maps.len() == 1 {
        return Ok(first.clone());
    }
    let base = first.to_vec();
    let mut dev = vec![0.0f64; base.len()];
    for m in &maps[1..] {
        for (d, (&a, &b)) in dev.iter_mut().zip(m.to_vec().iter().zip(&base)) {
            *d += a.to_f64() - b.to_f64();
        }
    }
    let scale = 1.0 / maps.len() as f64;
    let mean: Vec<E> = base
        .iter()
        .zip(&dev)
        .map(|(&b, &d)| E::from_f64(b.to_f64() + d * scale))
        .collect();
    Tensor::from_vec(mean, first.shape())
}

/// Hard labels from a probability map (K, H, W, D); ties go to the lowest
/// class index.
pub fn argmax_labels<E: Element>(probs: &Tensor<E>, spacing: [f64; 3]) -> Result<Volume> {
    let shape = probs.shape();
    if shape.len() != 4 {
        return Err(Error::shape(format!("label extraction expects (K, H, W, D), got {shape:?}")));
    }
    let (k, h, w, d) = (shape[0], shape[1], shape[2], shape[3]);
    let nvox = h * w * d;
    let data = probs.data();
    let mut labels = Vec::with_capacity(nvox);
    for v in 0..nvox {
        let mut best = 0usize;
        let mut best_p = data[v];
        for c in 1..k {
            let p = data[c * nvox + v];
            if p > best_p {
                best_p = p;
                best = c;
            }
        }
        labels.push(best as f64);
    }
    Volume::new([h, w, d], spacing, VolumeKind::Label, labels)
}
