//! Voxel volumes and their geometric/intensity transforms.
//!
//! A [`Volume`] is an immutable row-major (H, W, D) grid, depth fastest,
//! with per-axis spacing in millimeters. Values are held as f64 regardless
//! of on-disk dtype; label volumes hold non-negative integers exactly.

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum VolumeKind {
    Intensity,
    Label,
}

#[derive(Clone, Debug)]
pub struct Volume {
    pub extents: [usize; 3],
    pub spacing: [f64; 3],
    pub kind: VolumeKind,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn new(
        extents: [usize; 3],
        spacing: [f64; 3],
        kind: VolumeKind,
        data: Vec<f64>,
    ) -> Result<Volume> {
        let n: usize = extents.iter().product();
        if n == 0 {
            return Err(Error::shape(format!("volume extents {extents:?} contain a zero")));
        }
        if data.len() != n {
            return Err(Error::shape(format!(
                "volume extents {extents:?} need {n} values, got {}",
                data.len()
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::shape(format!("spacing must be positive, got {spacing:?}")));
        }
        if kind == VolumeKind::Label {
            if let Some(v) = data.iter().find(|v| !(v.fract() == 0.0 && **v >= 0.0)) {
                return Err(Error::shape(format!(
                    "label volumes must hold non-negative integers, found {v}"
                )));
            }
        }
        Ok(Volume { extents, spacing, kind, data })
    }

    pub fn numel(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.extents[1] + j) * self.extents[2] + k]
    }

    /// clamp((x - lo) / (hi - lo), 0, 1): maps the interesting intensity
    /// band to [0, 1].
    pub fn intensity_window(&self, lo: f64, hi: f64) -> Result<Volume> {
        if self.kind != VolumeKind::Intensity {
            return Err(Error::shape("intensity windowing applies to intensity volumes"));
        }
        if !(lo < hi) {
            return Err(Error::config(format!(
                "intensity window needs lo < hi, got [{lo}, {hi}]"
            )));
        }
        let span = hi - lo;
        let data = self.data.iter().map(|&x| ((x - lo) / span).clamp(0.0, 1.0)).collect();
        Ok(Volume { extents: self.extents, spacing: self.spacing, kind: self.kind, data })
    }

    /// Resamples to a target spacing: trilinear for intensity volumes,
    /// nearest-neighbor for labels. New extents are round(old * sp / target)
    /// clamped to at least 1. Sampling is index-aligned: output index i maps
    /// to input coordinate i * target / spacing, clamped to the grid.
    pub fn resample(&self, target: [f64; 3]) -> Result<Volume> {
        if target.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::config(format!("target spacing must be positive, got {target:?}")));
        }
        let mut extents = [0usize; 3];
        let mut scale = [0f64; 3];
        for a in 0..3 {
            let n = (self.extents[a] as f64 * self.spacing[a] / target[a]).round();
            extents[a] = (n as usize).max(1);
            scale[a] = target[a] / self.spacing[a];
        }
        let mut data = Vec::with_capacity(extents.iter().product());
        let limit = self.extents.map(|e| e - 1);
        for i in 0..extents[0] {
            let x = (i as f64 * scale[0]).min(limit[0] as f64);
            for j in 0..extents[1] {
                let y = (j as f64 * scale[1]).min(limit[1] as f64);
                for k in 0..extents[2] {
                    let z = (k as f64 * scale[2]).min(limit[2] as f64);
                    data.push(match self.kind {
                        VolumeKind::Label => {
                            self.at(x.round() as usize, y.round() as usize, z.round() as usize)
                        }
                        VolumeKind::Intensity => self.trilinear(x, y, z, limit),
                    });
                }
            }
        }
        Volume::new(extents, target, self.kind, data)
    }

    fn trilinear(&self, x: f64, y: f64, z: f64, limit: [usize; 3]) -> f64 {
        let (x0, y0, z0) = (x.floor() as usize, y.floor() as usize, z.floor() as usize);
        let (x1, y1, z1) = ((x0 + 1).min(limit[0]), (y0 + 1).min(limit[1]), (z0 + 1).min(limit[2]));
        let (fx, fy, fz) = (x - x0 as f64, y - y0 as f64, z - z0 as f64);
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let c00 = lerp(self.at(x0, y0, z0), self.at(x1, y0, z0), fx);
        let c01 = lerp(self.at(x0, y0, z1), self.at(x1, y0, z1), fx);
        let c10 = lerp(self.at(x0, y1, z0), self.at(x1, y1, z0), fx);
        let c11 = lerp(self.at(x0, y1, z1), self.at(x1, y1, z1), fx);
        lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz)
    }

    /// Mirror along one axis. Applying it twice restores the input bitwise.
    pub fn flipped(&self, axis: usize) -> Volume {
        let e = self.extents;
        let mut data = vec![0.0; self.data.len()];
        for i in 0..e[0] {
            for j in 0..e[1] {
                for k in 0..e[2] {
                    let mut idx = [i, j, k];
                    idx[axis] = e[axis] - 1 - idx[axis];
                    data[(idx[0] * e[1] + idx[1]) * e[2] + idx[2]] = self.at(i, j, k);
                }
            }
        }
        Volume { extents: self.extents, spacing: self.spacing, kind: self.kind, data }
    }

    /// Quarter turn in the plane of axes (a, b) with a < b: index along a
    /// becomes index along b, reversed. Extents and spacing swap with it.
    pub fn rotated90(&self, a: usize, b: usize) -> Volume {
        let e = self.extents;
        let mut extents = e;
        extents.swap(a, b);
        let mut spacing = self.spacing;
        spacing.swap(a, b);
        let mut data = vec![0.0; self.data.len()];
        for i in 0..e[0] {
            for j in 0..e[1] {
                for k in 0..e[2] {
                    let src = [i, j, k];
                    let mut dst = src;
                    dst[a] = src[b];
                    dst[b] = e[a] - 1 - src[a];
                    data[(dst[0] * extents[1] + dst[1]) * extents[2] + dst[2]] = self.at(i, j, k);
                }
            }
        }
        Volume { extents, spacing, kind: self.kind, data }
    }

    fn crop(&self, corner: [usize; 3], window: [usize; 3]) -> Volume {
        let mut data = Vec::with_capacity(window.iter().product());
        for i in 0..window[0] {
            for j in 0..window[1] {
                for k in 0..window[2] {
                    data.push(self.at(corner[0] + i, corner[1] + j, corner[2] + k));
                }
            }
        }
        Volume { extents: window, spacing: self.spacing, kind: self.kind, data }
    }
}

/// Training augmentation. Each transform triggers independently with
/// probability 0.1, fully determined by the seed: a flip per axis, one
/// quarter turn in a uniformly chosen plane, and an intensity scale
/// (U[0.9, 1.1]) plus shift (U[-0.1, 0.1]) applied to the image only.
/// Image and label receive identical spatial transforms.
pub fn augment(image: &Volume, label: &Volume, seed: u64) -> Result<(Volume, Volume)> {
    if image.extents != label.extents {
        return Err(Error::shape(format!(
            "image extents {:?} do not match label extents {:?}",
            image.extents, label.extents
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = image.clone();
    let mut label = label.clone();
    // Draw order is part of the format: three flips, rotation, intensity.
    for axis in 0..3 {
        if rng.gen_bool(0.1) {
            image = image.flipped(axis);
            label = label.flipped(axis);
        }
    }
    if rng.gen_bool(0.1) {
        let (a, b) = [(0, 1), (0, 2), (1, 2)][rng.gen_range(0..3)];
        image = image.rotated90(a, b);
        label = label.rotated90(a, b);
    }
    if rng.gen_bool(0.1) {
        let scale = rng.gen_range(0.9..1.1);
        let shift = rng.gen_range(-0.1..0.1);
        for v in &mut image.data {
            *v = *v * scale + shift;
        }
    }
    Ok((image, label))
}

/// Crops a training window: with probability 0.5 the window is centered on
/// a uniformly chosen foreground voxel (label > 0), otherwise its corner is
/// uniform over all valid positions. Falls back to uniform when the label
/// has no foreground.
pub fn foreground_crop(
    image: &Volume,
    label: &Volume,
    window: [usize; 3],
    rng: &mut ChaCha8Rng,
) -> Result<(Volume, Volume)> {
    if image.extents != label.extents {
        return Err(Error::shape(format!(
            "image extents {:?} do not match label extents {:?}",
            image.extents, label.extents
        )));
    }
    let e = image.extents;
    if (0..3).any(|a| window[a] == 0 || window[a] > e[a]) {
        return Err(Error::shape(format!(
            "crop window {window:?} does not fit in extents {e:?}"
        )));
    }
    let corner = if rng.gen_bool(0.5) {
        let fg: Vec<usize> = label
            .data
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| (v > 0.0).then_some(i))
            .collect();
        if fg.is_empty() {
            uniform_corner(e, window, rng)
        } else {
            let flat = fg[rng.gen_range(0..fg.len())];
            let center = [
                flat / (e[1] * e[2]),
                flat / e[2] % e[1],
                flat % e[2],
            ];
            let mut corner = [0usize; 3];
            for a in 0..3 {
                corner[a] = center[a].saturating_sub(window[a] / 2).min(e[a] - window[a]);
            }
            corner
        }
    } else {
        uniform_corner(e, window, rng)
    };
    Ok((image.crop(corner, window), label.crop(corner, window)))
}

fn uniform_corner(e: [usize; 3], window: [usize; 3], rng: &mut ChaCha8Rng) -> [usize; 3] {
    let mut corner = [0usize; 3];
    for a in 0..3 {
        corner[a] = rng.gen_range(0..=e[a] - window[a]);
    }
    corner
}
