//! Loss, optimizer, learning-rate schedule, and the training loop, plus the
//! synthetic data generator and cross-validation fold assignment used by the
//! desk-scale experiments.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Element, Tensor};
use crate::volume::{augment, foreground_crop, Volume, VolumeKind};

/// Smoothing constant in the soft Dice denominator and numerator.
pub const DICE_EPS: f64 = 1e-5;

/// Training hyperparameters. Field names double as the config-file keys.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub window: [usize; 3],
    pub seed: u64,
    pub dice_weight: f64,
    pub ce_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            peak_lr: 1e-4,
            weight_decay: 1e-5,
            warmup_steps: 500,
            total_steps: 50_000,
            batch_size: 1,
            window: [96; 3],
            seed: 0,
            dice_weight: 1.0,
            ce_weight: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.peak_lr <= 0.0 || !self.peak_lr.is_finite() {
            return Err(Error::config(format!("peak_lr must be positive, got {}", self.peak_lr)));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.total_steps == 0 || self.batch_size == 0 {
            return Err(Error::config("total_steps and batch_size must be positive"));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.window.iter().any(|&w| w == 0) {
            return Err(Error::config(format!("window extents must be positive, got {:?}", self.window)));
        }
        if self.dice_weight < 0.0 || self.ce_weight < 0.0 || self.dice_weight + self.ce_weight <= 0.0 {
            return Err(Error::config("loss weights must be non-negative and not both zero"));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr` over `warmup_steps`, then half-cosine
/// decay to 0 at `total_steps`. Monotone non-increasing after warmup.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let (w, t) = (cfg.warmup_steps, cfg.total_steps);
    if step >= t {
        return 0.0;
    }
    if step < w {
        return cfg.peak_lr * step as f64 / w as f64;
    }
    let frac = (step - w) as f64 / (t - w) as f64;
    cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Soft-Dice + cross-entropy on class probabilities of shape (b, K, vox).
///
/// loss = w_d * (1 - mean_k dice_k) + w_ce * CE, where dice_k sums over the
/// whole batch: (2 sum p_k t_k + eps) / (sum p_k + sum t_k + eps).
pub fn dice_ce_loss<E: Element>(
    probs: &Tensor<E>,
    target: &[usize],
    dice_weight: f64,
    ce_weight: f64,
) -> Result<Tensor<E>> {
    let shape = probs.shape();
    if shape.len() != 3 {
        return Err(Error::shape(format!("loss expects probabilities (b, K, vox), got {shape:?}")));
    }
    let (b, k, vox) = (shape[0], shape[1], shape[2]);
    if target.len() != b * vox {
        return Err(Error::shape(format!(
            "loss got {} target labels for {} voxels",
            target.len(),
            b * vox
        )));
    }
    if let Some(bad) = target.iter().find(|&&t| t >= k) {
        return Err(Error::shape(format!("target label {bad} outside [0, {k})")));
    }

    let mut onehot = vec![E::ZERO; b * k * vox];
    for (i, &t) in target.iter().enumerate() {
        let (bi, vi) = (i / vox, i % vox);
        onehot[(bi * k + t) * vox + vi] = E::ONE;
    }
    let onehot = Tensor::from_vec(onehot, &[b, k, vox])?;

    // Per-class sums over batch and voxels, shape (K).
    let inter = probs.mul(&onehot)?.sum_axis(2)?.sum_axis(0)?;
    let psum = probs.sum_axis(2)?.sum_axis(0)?;
    let tsum = onehot.sum_axis(2)?.sum_axis(0)?;
    let eps = E::from_f64(DICE_EPS);
    let dice = inter
        .mul_scalar(E::from_f64(2.0))
        .add_scalar(eps)
        .div(&psum.add(&tsum)?.add_scalar(eps))?;
    let dice_loss = dice.mean_all().mul_scalar(-E::ONE).add_scalar(E::ONE);

    let ce = probs
        .ln_clamped(E::from_f64(1e-12))
        .mul(&onehot)?
        .sum_all()
        .mul_scalar(E::from_f64(-1.0 / (b * vox) as f64));

    dice_loss
        .mul_scalar(E::from_f64(dice_weight))
        .add(&ce.mul_scalar(E::from_f64(ce_weight)))
}

/// Adaptive moment estimation with decoupled weight decay. Moments are kept
/// in f64 regardless of the model element type; the weight update for one
/// parameter w is w -= lr * (mhat / (sqrt(vhat) + eps) + weight_decay * w).
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<E: Element>(params: &[(String, Tensor<E>)], weight_decay: f64) -> AdamW {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|(_, p)| vec![0.0; p.numel()]).collect(),
        }
    }

    /// One update over accumulated gradients, after scaling them so the
    /// global gradient norm is at most `clip`. Parameters without a gradient
    /// this step are left untouched. Clears all gradients.
    pub fn step<E: Element>(
        &mut self,
        params: &[(String, Tensor<E>)],
        lr: f64,
        clip: f64,
    ) -> Result<()> {
        assert_eq!(params.len(), self.m.len(), "optimizer bound to a different parameter set");
        let grads: Vec<Option<Vec<f64>>> = params
            .iter()
            .map(|(_, p)| p.grad().map(|g| g.iter().map(|x| x.to_f64()).collect()))
            .collect();

        let sq: f64 = grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|&x| x * x)
            .sum();
        if !sq.is_finite() {
            return Err(Error::train("non-finite gradient norm"));
        }
        let norm = sq.sqrt();
        let scale = if norm > clip { clip / norm } else { 1.0 };

        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, p)) in params.iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            p.update_data(|w| {
                for j in 0..w.len() {
                    let gj = g[j] * scale;
                    m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                    v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    let wj = w[j].to_f64();
                    let delta = lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * wj);
                    w[j] = E::from_f64(wj - delta);
                }
            });
            p.zero_grad();
        }
        Ok(())
    }
}

/// One training sample: an intensity volume and its label map.
pub struct Sample {
    pub id: String,
    pub image: Volume,
    pub label: Volume,
}

/// Knobs outside the hyperparameter contract: augmentation on/off,
/// checkpoint cadence (0 = only the final checkpoint is written), and an
/// optional step cap for peeking at early dynamics without shortening the
/// schedule itself.
pub struct TrainOptions {
    pub augment: bool,
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub log: bool,
    pub max_steps: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            augment: false,
            checkpoint_every: 0,
            checkpoint_dir: None,
            log: false,
            max_steps: None,
        }
    }
}

/// Per-step traces. `lrs[i]` is the rate used by update i, which is
/// `lr_schedule(i + 1)`: updates are numbered from 1 so the very first one
/// already moves the weights.
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub lrs: Vec<f64>,
}

/// Seed-deterministic training loop: sample windows, forward, loss,
/// backward, clipped update. Loss is recorded before each update. A
/// non-finite loss aborts with the step index.
pub fn train<E: Element>(
    model: &mut Model<E>,
    data: &[Sample],
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::train("no training samples"));
    }
    if model.config.in_channels != 1 {
        return Err(Error::config(format!(
            "volume pipeline feeds a single channel, model expects {}",
            model.config.in_channels
        )));
    }
    if cfg.window != model.config.window {
        return Err(Error::config(format!(
            "training window {:?} does not match model window {:?}",
            cfg.window, model.config.window
        )));
    }
    for s in data {
        if s.image.extents != s.label.extents {
            return Err(Error::train(format!(
                "sample {}: image extents {:?} vs label extents {:?}",
                s.id, s.image.extents, s.label.extents
            )));
        }
        if s.label.kind != VolumeKind::Label {
            return Err(Error::train(format!("sample {}: label volume is not of label kind", s.id)));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(model.params(), cfg.weight_decay);
    let vox: usize = cfg.window.iter().product();
    let classes = model.config.classes;
    let steps = opts.max_steps.map_or(cfg.total_steps, |m| m.min(cfg.total_steps));
    let mut losses = Vec::with_capacity(steps);
    let mut lrs = Vec::with_capacity(steps);

    for step in 0..steps {
        let mut pixels = Vec::with_capacity(cfg.batch_size * vox);
        let mut target = Vec::with_capacity(cfg.batch_size * vox);
        for _ in 0..cfg.batch_size {
            let s = &data[rng.gen_range(0..data.len())];
            let (image, label) = if opts.augment {
                augment(&s.image, &s.label, rng.gen())?
            } else {
                (s.image.clone(), s.label.clone())
            };
            let (ci, cl) = foreground_crop(&image, &label, cfg.window, &mut rng)?;
            pixels.extend(ci.data.iter().map(|&x| E::from_f64(x)));
            for &l in &cl.data {
                let l = l as usize;
                if l >= classes {
                    return Err(Error::train(format!(
                        "sample {}: label {l} outside the {classes}-class model",
                        s.id
                    )));
                }
                target.push(l);
            }
        }
        let [w0, w1, w2] = cfg.window;
        let input = Tensor::from_vec(pixels, &[cfg.batch_size, 1, w0, w1, w2])?;

        let logits = model.forward(&input)?;
        let probs = logits.reshape(&[cfg.batch_size, classes, vox])?.softmax(1)?;
        let loss = dice_ce_loss(&probs, &target, cfg.dice_weight, cfg.ce_weight)?;
        let loss_val = loss.item().to_f64();
        if !loss_val.is_finite() {
            return Err(Error::train(format!("non-finite loss {loss_val} at step {step}")));
        }
        loss.backward()?;

        let lr = lr_schedule(step + 1, cfg);
        opt.step(model.params(), lr, 1.0)
            .map_err(|e| Error::train(format!("{e} at step {step}")))?;
        losses.push(loss_val);
        lrs.push(lr);
        if opts.log {
            eprintln!("step {step:>6}  lr {lr:.3e}  loss {loss_val:.6}");
        }

        if let Some(dir) = &opts.checkpoint_dir {
            if opts.checkpoint_every > 0 && (step + 1) % opts.checkpoint_every == 0 {
                let path = dir.join(format!("step-{:06}.unst", step + 1));
                crate::checkpoint::save(model, (step + 1) as u64, &path)?;
            }
        }
    }

    if let Some(dir) = &opts.checkpoint_dir {
        crate::checkpoint::save(model, steps as u64, &dir.join("final.unst"))?;
    }
    Ok(TrainReport { losses, lrs })
}

/// Deterministic segmentation phantom: `classes - 1` solid shapes (spheres
/// and cuboids alternating) on an empty background, intensities separated by
/// class with light uniform noise. Returns (image, label).
pub fn synthetic_volume(extents: [usize; 3], classes: usize, seed: u64) -> Result<(Volume, Volume)> {
    if classes < 2 {
        return Err(Error::config(format!("synthetic volume needs at least 2 classes, got {classes}")));
    }
    if extents.iter().any(|&e| e < 8) {
        return Err(Error::config(format!("synthetic extents {extents:?} too small for shapes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = extents.iter().product();
    let mut labels = vec![0.0; n];

    for class in 1..classes {
        let center: Vec<f64> = (0..3)
            .map(|a| rng.gen_range(extents[a] as f64 / 4.0..extents[a] as f64 * 3.0 / 4.0))
            .collect();
        let emin = *extents.iter().min().unwrap() as f64;
        let size = rng.gen_range(emin / 6.0..emin / 4.0);
        for i in 0..extents[0] {
            for j in 0..extents[1] {
                for k in 0..extents[2] {
                    let d = [i, j, k]
                        .iter()
                        .zip(&center)
                        .map(|(&x, c)| x as f64 + 0.5 - c)
                        .collect::<Vec<_>>();
                    let inside = if class % 2 == 1 {
                        d.iter().map(|x| x * x).sum::<f64>() <= size * size
                    } else {
                        d.iter().all(|x| x.abs() <= size)
                    };
                    if inside {
                        labels[(i * extents[1] + j) * extents[2] + k] = class as f64;
                    }
                }
            }
        }
    }

    let image: Vec<f64> = labels
        .iter()
        .map(|&c| {
            let base = (c + 0.5) / classes as f64;
            (base + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0)
        })
        .collect();

    Ok((
        Volume::new(extents, [1.0; 3], VolumeKind::Intensity, image)?,
        Volume::new(extents, [1.0; 3], VolumeKind::Label, labels)?,
    ))
}

/// Cross-validation fold of a sample id: stable 64-bit FNV-1a hash mod
/// `folds`, so assignment never depends on dataset order.
pub fn fold_of(id: &str, folds: usize) -> usize {
    assert!(folds > 0, "fold count must be positive");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (h % folds as u64) as usize
}

/// Index split for one fold: (train, validation) positions into `ids`.
pub fn fold_split(ids: &[String], fold: usize, folds: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if folds == 0 || fold >= folds {
        return Err(Error::config(format!("fold {fold} outside 0..{folds}")));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, id) in ids.iter().enumerate() {
        if fold_of(id, folds) == fold {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    Ok((train, val))
}
