//! Built-in verification suites: per-op gradient checks against central
//! differences (run in 64-bit where roundoff stays far below the
//! tolerances), a whole-model gradient check, and a deterministic property
//! suite covering the numeric contracts the rest of the crate leans on.

use crate::encoder::{blockify, unblockify};
use crate::error::Result;
use crate::infer::window_starts;
use crate::metrics::{dsc, hausdorff};
use crate::model::{Model, ModelConfig, Scale};
use crate::tensor::{grad_check, GradCheckReport, Tensor};
use crate::train::{dice_ce_loss, lr_schedule, TrainConfig};
use crate::volume::{Volume, VolumeKind};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct OpCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values bounded away from zero (for divisors and log arguments).
fn nonzero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.gen_range(0.5..1.5);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// Fixed random cotangent so every output element is weighted differently.
/// Callers pass a freshly cloned rng so repeated evaluations of the same loss
/// see identical weights.
fn scalarize(y: &Tensor<f64>, rng: &mut ChaCha8Rng) -> Result<Tensor<f64>> {
    let w = Tensor::from_vec(uniform(rng, y.numel(), -1.0, 1.0), y.shape())?;
    Ok(y.mul(&w)?.sum_all())
}

/// Checks every differentiable primitive against central differences.
/// Each case probes all elements of all inputs.
pub fn gradcheck_ops() -> Result<Vec<OpCheck>> {
    const EPS: f64 = 1e-5;
    let mut out = Vec::new();
    let mut check = |name: &'static str,
                     params: &[(&str, &Tensor<f64>)],
                     f: &mut dyn FnMut() -> Result<Tensor<f64>>|
     -> Result<()> {
        let report = grad_check(f, params, EPS, 0)?;
        out.push(OpCheck { name, report });
        Ok(())
    };

    {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::param(uniform(&mut rng, 24, -1.0, 1.0), &[2, 3, 4])?;
        let b = Tensor::param(uniform(&mut rng, 24, -1.0, 1.0), &[2, 3, 4])?;
        let w = ChaCha8Rng::seed_from_u64(111);
        check("add", &[("a", &a), ("b", &b)], &mut || {
            scalarize(&a.add(&b)?, &mut w.clone())
        })?;
        check("sub", &[("a", &a), ("b", &b)], &mut || {
            scalarize(&a.sub(&b)?, &mut w.clone())
        })?;
        check("mul", &[("a", &a), ("b", &b)], &mut || {
            scalarize(&a.mul(&b)?, &mut w.clone())
        })?;
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = Tensor::param(uniform(&mut rng, 24, -1.0, 1.0), &[2, 3, 4])?;
        let b = Tensor::param(nonzero(&mut rng, 24), &[2, 3, 4])?;
        let w = ChaCha8Rng::seed_from_u64(112);
        check("div", &[("a", &a), ("b", &b)], &mut || {
            scalarize(&a.div(&b)?, &mut w.clone())
        })?;
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = Tensor::param(uniform(&mut rng, 24, -2.0, 2.0), &[2, 3, 4])?;
        let w = ChaCha8Rng::seed_from_u64(113);
        check("add_scalar", &[("a", &a)], &mut || {
            scalarize(&a.add_scalar(0.7), &mut w.clone())
        })?;
        check("mul_scalar", &[("a", &a)], &mut || {
            scalarize(&a.mul_scalar(-1.3), &mut w.clone())
        })?;
        check("gelu", &[("a", &a)], &mut || scalarize(&a.gelu(), &mut w.clone()))?;
        check("leaky_relu", &[("a", &a)], &mut || {
            scalarize(&a.leaky_relu(0.01), &mut w.clone())
        })?;
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a = Tensor::param(uniform(&mut rng, 24, 0.1, 2.0), &[2, 3, 4])?;
        let w = ChaCha8Rng::seed_from_u64(114);
        check("ln", &[("a", &a)], &mut || {
            scalarize(&a.ln_clamped(1e-30), &mut w.clone())
        })?;
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = Tensor::param(uniform(&mut rng, 24, -1.0, 1.0), &[2, 3, 4])?;
        let b1 = Tensor::param(uniform(&mut rng, 4, -1.0, 1.0), &[4])?;
        let b2 = Tensor::param(uniform(&mut rng, 12, -1.0, 1.0), &[3, 4])?;
        let w = ChaCha8Rng::seed_from_u64(115);
        check("bias_add_vec", &[("x", &x), ("b", &b1)], &mut || {
            scalarize(&x.bias_add(&b1)?, &mut w.clone())
        })?;
        check("bias_add_suffix", &[("x", &x), ("b", &b2)], &mut || {
            scalarize(&x.bias_add(&b2)?, &mut w.clone())
        })?;
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let a = Tensor::param(uniform(&mut rng, 24, -1.0, 1.0), &[2, 3, 4])?;
        let b2 = Tensor::param(uniform(&mut rng, 20, -1.0, 1.0), &[4, 5])?;
        let bb = Tensor::param(uniform(&mut rng, 40, -1.0, 1.0), &[2, 4, 5])?;
        let w = ChaCha8Rng::seed_from_u64(116);
        check("matmul_shared_rhs", &[("a", &a), ("b", &b2)], &mut || {
            scalarize(&a.matmul(&b2)?, &mut w.clone())
        })?;
        check("matmul_batched", &[("a", &a), ("b", &bb)], &mut || {
            scalarize(&a.matmul(&bb)?, &mut w.clone())
        })?;
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = Tensor::param(uniform(&mut rng, 24, -2.0, 2.0), &[3, 4, 2])?;
        let w = ChaCha8Rng::seed_from_u64(117);
        for axis in 0..3 {
            check(
                ["softmax_axis0", "softmax_axis1", "softmax_axis2"][axis],
                &[("x", &x)],
                &mut || scalarize(&x.softmax(axis)?, &mut w.clone()),
            )?;
            check(
                ["log_softmax_axis0", "log_softmax_axis1", "log_softmax_axis2"][axis],
                &[("x", &x)],
                &mut || scalarize(&x.log_softmax(axis)?, &mut w.clone()),
            )?;
        }
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let x = Tensor::param(uniform(&mut rng, 24, -1.0, 1.0), &[4, 6])?;
        let scale = Tensor::param(uniform(&mut rng, 6, 0.5, 1.5), &[6])?;
        let shift = Tensor::param(uniform(&mut rng, 6, -0.5, 0.5), &[6])?;
        let w = ChaCha8Rng::seed_from_u64(118);
        check(
            "layer_norm",
            &[("x", &x), ("scale", &scale), ("shift", &shift)],
            &mut || scalarize(&x.layer_norm(&scale, &shift, 1e-5)?, &mut w.clone()),
        )?;
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let x = Tensor::param(uniform(&mut rng, 48, -1.0, 1.0), &[2, 2, 3, 2, 2])?;
        let w = ChaCha8Rng::seed_from_u64(119);
        check("instance_norm", &[("x", &x)], &mut || {
            scalarize(&x.instance_norm(1e-5)?, &mut w.clone())
        })?;
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let x = Tensor::param(uniform(&mut rng, 2 * 5 * 4 * 3, -1.0, 1.0), &[1, 2, 5, 4, 3])?;
        let wt = Tensor::param(uniform(&mut rng, 3 * 2 * 27, -0.5, 0.5), &[3, 2, 3, 3, 3])?;
        let b = Tensor::param(uniform(&mut rng, 3, -0.5, 0.5), &[3])?;
        let w = ChaCha8Rng::seed_from_u64(120);
        check(
            "conv3d_k3s1p1",
            &[("x", &x), ("w", &wt), ("b", &b)],
            &mut || scalarize(&x.conv3d(&wt, &b, [1, 1, 1], [1, 1, 1])?, &mut w.clone()),
        )?;
        check(
            "conv3d_k3s2p1",
            &[("x", &x), ("w", &wt), ("b", &b)],
            &mut || scalarize(&x.conv3d(&wt, &b, [2, 2, 2], [1, 1, 1])?, &mut w.clone()),
        )?;
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::param(uniform(&mut rng, 2 * 4 * 4 * 4, -1.0, 1.0), &[1, 2, 4, 4, 4])?;
        let wt = Tensor::param(uniform(&mut rng, 2 * 3 * 8, -0.5, 0.5), &[2, 3, 2, 2, 2])?;
        let b = Tensor::param(uniform(&mut rng, 3, -0.5, 0.5), &[3])?;
        let w = ChaCha8Rng::seed_from_u64(121);
        check(
            "conv_transpose3d_k2s2",
            &[("x", &x), ("w", &wt), ("b", &b)],
            &mut || scalarize(&x.conv_transpose3d(&wt, &b, [2, 2, 2], [0, 0, 0])?, &mut w.clone()),
        )?;
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = Tensor::param(uniform(&mut rng, 2 * 3 * 3 * 3, -1.0, 1.0), &[1, 2, 3, 3, 3])?;
        let wt = Tensor::param(uniform(&mut rng, 2 * 2 * 27, -0.5, 0.5), &[2, 2, 3, 3, 3])?;
        let b = Tensor::param(uniform(&mut rng, 2, -0.5, 0.5), &[2])?;
        let w = ChaCha8Rng::seed_from_u64(122);
        check(
            "conv_transpose3d_k3s1p1",
            &[("x", &x), ("w", &wt), ("b", &b)],
            &mut || scalarize(&x.conv_transpose3d(&wt, &b, [1, 1, 1], [1, 1, 1])?, &mut w.clone()),
        )?;
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = Tensor::param(uniform(&mut rng, 2 * 64, -1.0, 1.0), &[1, 2, 4, 4, 4])?;
        let w = ChaCha8Rng::seed_from_u64(123);
        check("max_pool3d_k2s2", &[("x", &x)], &mut || {
            scalarize(&x.max_pool3d([2, 2, 2], [2, 2, 2])?, &mut w.clone())
        })?;
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let x = Tensor::param(uniform(&mut rng, 24, -1.0, 1.0), &[3, 4, 2])?;
        let y = Tensor::param(uniform(&mut rng, 24, -1.0, 1.0), &[3, 4, 2])?;
        let w = ChaCha8Rng::seed_from_u64(124);
        check("reshape", &[("x", &x)], &mut || {
            scalarize(&x.reshape(&[4, 6])?, &mut w.clone())
        })?;
        check("permute", &[("x", &x)], &mut || {
            scalarize(&x.permute(&[2, 0, 1])?, &mut w.clone())
        })?;
        check("concat_axis1", &[("x", &x), ("y", &y)], &mut || {
            scalarize(&Tensor::concat(&[x.clone(), y.clone()], 1)?, &mut w.clone())
        })?;
        check("slice", &[("x", &x)], &mut || {
            scalarize(&x.slice(&[1, 1, 0], &[2, 2, 2])?, &mut w.clone())
        })?;
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let x = Tensor::param(uniform(&mut rng, 24, -1.0, 1.0), &[2, 3, 4])?;
        let w = ChaCha8Rng::seed_from_u64(125);
        check("sum_all", &[("x", &x)], &mut || Ok(x.sum_all()))?;
        check("mean_all", &[("x", &x)], &mut || Ok(x.mean_all()))?;
        for axis in 0..3 {
            check(
                ["sum_axis0", "sum_axis1", "sum_axis2"][axis],
                &[("x", &x)],
                &mut || scalarize(&x.sum_axis(axis)?, &mut w.clone()),
            )?;
        }
    }
    {
        // Composite chain touching reuse (x enters twice) and mixed ops.
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let x = Tensor::param(uniform(&mut rng, 24, -1.0, 1.0), &[2, 3, 4])?;
        let p = Tensor::param(uniform(&mut rng, 16, -0.7, 0.7), &[4, 4])?;
        let w = ChaCha8Rng::seed_from_u64(126);
        check("composite_reuse", &[("x", &x), ("p", &p)], &mut || {
            let h = x.matmul(&p)?.gelu();
            let m = h.add(&x)?.softmax(2)?;
            scalarize(&m, &mut w.clone())
        })?;
    }
    Ok(out)
}

/// Finite-difference check of the whole micro model under the training
/// loss: random input and labels, every parameter tensor probed at
/// `probes_per_param` evenly spaced elements (0 probes all of them).
pub fn gradcheck_model(probes_per_param: usize) -> Result<OpCheck> {
    let config = ModelConfig { window: [8; 3], ..ModelConfig::micro() };
    let model = Model::<f64>::build(&config, 31)?;
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let vox = config.window.iter().product::<usize>();
    let input = Tensor::from_vec(uniform(&mut rng, vox, -1.0, 1.0), &[1, 1, 8, 8, 8])?;
    let target: Vec<usize> = (0..vox).map(|_| rng.gen_range(0..config.classes)).collect();
    let params: Vec<(&str, &Tensor<f64>)> =
        model.params().iter().map(|(n, p)| (n.as_str(), p)).collect();
    let classes = config.classes;
    let report = grad_check(
        || {
            let logits = model.forward(&input)?;
            let probs = logits.reshape(&[1, classes, vox])?.softmax(1)?;
            dice_ce_loss(&probs, &target, 1.0, 1.0)
        },
        &params,
        1e-5,
        probes_per_param,
    )?;
    Ok(OpCheck { name: "micro_model", report })
}

/// One deterministic property check: a numeric contract verified against
/// values computed inside the check itself.
pub struct PropertyCheck {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn push(out: &mut Vec<PropertyCheck>, name: &'static str, pass: bool, detail: String) {
    out.push(PropertyCheck { name, pass, detail });
}

/// Naive seven-loop convolution used as the oracle for the gemm-backed one.
fn conv3d_naive(
    x: &[f64],
    xs: [usize; 5],
    w: &[f64],
    ws: [usize; 5],
    b: &[f64],
    stride: [usize; 3],
    pad: [usize; 3],
) -> Vec<f64> {
    let (bn, cin) = (xs[0], xs[1]);
    let cout = ws[0];
    let os: Vec<usize> =
        (0..3).map(|a| (xs[2 + a] + 2 * pad[a] - ws[2 + a]) / stride[a] + 1).collect();
    let mut out = vec![0.0; bn * cout * os[0] * os[1] * os[2]];
    let mut idx = 0;
    for n in 0..bn {
        for co in 0..cout {
            for o0 in 0..os[0] {
                for o1 in 0..os[1] {
                    for o2 in 0..os[2] {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for k0 in 0..ws[2] {
                                for k1 in 0..ws[3] {
                                    for k2 in 0..ws[4] {
                                        let i0 = (o0 * stride[0] + k0) as isize - pad[0] as isize;
                                        let i1 = (o1 * stride[1] + k1) as isize - pad[1] as isize;
                                        let i2 = (o2 * stride[2] + k2) as isize - pad[2] as isize;
                                        if i0 < 0
                                            || i1 < 0
                                            || i2 < 0
                                            || i0 >= xs[2] as isize
                                            || i1 >= xs[3] as isize
                                            || i2 >= xs[4] as isize
                                        {
                                            continue;
                                        }
                                        let xi = (((n * cin + ci) * xs[2] + i0 as usize) * xs[3]
                                            + i1 as usize)
                                            * xs[4]
                                            + i2 as usize;
                                        let wi = (((co * cin + ci) * ws[2] + k0) * ws[3] + k1)
                                            * ws[4]
                                            + k2;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        out[idx] = acc;
                        idx += 1;
                    }
                }
            }
        }
    }
    out
}

/// Deterministic property suite behind the `selftest` subcommand. Every
/// check compares library behavior against values derived inside the check.
pub fn property_suite() -> Result<Vec<PropertyCheck>> {
    let mut out = Vec::new();

    {
        // Hierarchy geometry for scale B at its native window.
        let config = ModelConfig::scale(Scale::B);
        let mut geom = Vec::new();
        for level in 0..config.levels() {
            let (_, t, n) = config.block_geometry(level)?;
            geom.push((t, n));
        }
        let pass = geom == [(64, 216), (8, 216), (1, 216)];
        push(&mut out, "block_counts_scale_b", pass, format!("(T, n) per hierarchy: {geom:?}"));
    }

    {
        // Blockify then unblockify is the identity, bitwise.
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let mut failures = 0;
        let cases = 60;
        for _ in 0..cases {
            let g = [1usize, 2, 4][rng.gen_range(0..3)];
            let e: Vec<usize> = (0..3).map(|_| g * rng.gen_range(1..=3)).collect();
            let b = rng.gen_range(1..=2);
            let c = rng.gen_range(1..=5);
            let n = b * c * e[0] * e[1] * e[2];
            let x = Tensor::<f64>::from_vec(
                uniform(&mut rng, n, -10.0, 10.0),
                &[b, c, e[0], e[1], e[2]],
            )?;
            let back = unblockify(&blockify(&x, g)?, g, [e[0], e[1], e[2]])?;
            if back.shape() != x.shape() || back.to_vec() != x.to_vec() {
                failures += 1;
            }
        }
        push(
            &mut out,
            "blockify_roundtrip",
            failures == 0,
            format!("{failures} of {cases} random volumes failed to round-trip"),
        );
    }

    {
        // Convolution against the naive seven-loop oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let (xs, ws) = ([2, 3, 5, 4, 6], [4, 3, 3, 3, 3]);
        let x = uniform(&mut rng, xs.iter().product(), -1.0, 1.0);
        let w = uniform(&mut rng, ws.iter().product(), -0.5, 0.5);
        let b = uniform(&mut rng, ws[0], -0.5, 0.5);
        let mut worst = 0.0f64;
        for (stride, pad) in [([1, 1, 1], [1, 1, 1]), ([2, 2, 2], [1, 1, 1]), ([1, 2, 1], [0, 1, 1])] {
            let got = Tensor::<f64>::from_vec(x.clone(), &xs)?
                .conv3d(
                    &Tensor::from_vec(w.clone(), &ws)?,
                    &Tensor::from_vec(b.clone(), &[ws[0]])?,
                    stride,
                    pad,
                )?
                .to_vec();
            let want = conv3d_naive(&x, xs, &w, ws, &b, stride, pad);
            for (g, o) in got.iter().zip(&want) {
                worst = worst.max((g - o).abs() / o.abs().max(1.0));
            }
        }
        push(
            &mut out,
            "conv3d_matches_naive_oracle",
            worst < 1e-5,
            format!("worst relative error {worst:.3e}"),
        );
    }

    {
        // Softmax survives extreme logits and hits exact small-case values.
        let y = Tensor::<f64>::from_vec(vec![1000.0, 0.0], &[2])?.softmax(0)?.to_vec();
        let extreme = y[0] == 1.0 && y[1] == 0.0;
        let z = Tensor::<f64>::from_vec(vec![2.0f64.ln(), 0.0], &[2])?.softmax(0)?.to_vec();
        let exact = (z[0] - 2.0 / 3.0).abs() < 1e-12 && (z[1] - 1.0 / 3.0).abs() < 1e-12;
        push(
            &mut out,
            "softmax_extremes_and_pins",
            extreme && exact,
            format!("softmax(1000,0) = {y:?}, softmax(ln 2, 0) = {z:?}"),
        );

        // The sum of a softmax is constant, so its gradient vanishes.
        let x = Tensor::<f64>::param(vec![0.3, -1.2, 0.7, 2.0, -0.4, 0.1], &[2, 3])?;
        x.softmax(1)?.sum_all().backward()?;
        let gmax = x.grad().unwrap().iter().fold(0.0f64, |m, g| m.max(g.abs()));
        push(
            &mut out,
            "softmax_sum_gradient_vanishes",
            gmax < 1e-12,
            format!("largest gradient magnitude {gmax:.3e}"),
        );
    }

    {
        // Warmup-cosine schedule endpoints and monotone decay.
        let cfg = TrainConfig { peak_lr: 1e-4, warmup_steps: 500, total_steps: 5000, ..TrainConfig::default() };
        let ends = lr_schedule(0, &cfg) == 0.0
            && lr_schedule(500, &cfg) == cfg.peak_lr
            && lr_schedule(5000, &cfg) == 0.0;
        let mut monotone = true;
        for s in 500..5000 {
            if lr_schedule(s + 1, &cfg) > lr_schedule(s, &cfg) {
                monotone = false;
            }
        }
        push(
            &mut out,
            "lr_schedule_endpoints_and_decay",
            ends && monotone,
            format!(
                "lr(0) = {}, lr(500) = {}, lr(5000) = {}, monotone after warmup: {monotone}",
                lr_schedule(0, &cfg),
                lr_schedule(500, &cfg),
                lr_schedule(5000, &cfg)
            ),
        );
    }

    {
        // Built parameters match the analytic count.
        let config = ModelConfig::micro();
        let model = Model::<f64>::build(&config, 5)?;
        let built = model.count_params();
        let analytic = config.param_report()?.total;
        push(
            &mut out,
            "analytic_param_count_matches_build",
            built == analytic,
            format!("built {built}, analytic {analytic}"),
        );
    }

    {
        // Loss calibration: perfect one-hot probabilities cost nearly
        // nothing, uniform probabilities cost exactly ln K in cross-entropy.
        let k = 4usize;
        let vox = 6usize;
        let target: Vec<usize> = (0..vox).map(|v| v % k).collect();
        let mut onehot = vec![0.0; k * vox];
        for (v, &t) in target.iter().enumerate() {
            onehot[t * vox + v] = 1.0;
        }
        let perfect =
            dice_ce_loss(&Tensor::<f64>::from_vec(onehot, &[1, k, vox])?, &target, 1.0, 1.0)?
                .item();
        let uniform_probs = Tensor::<f64>::from_vec(vec![1.0 / k as f64; k * vox], &[1, k, vox])?;
        let ce = dice_ce_loss(&uniform_probs, &target, 0.0, 1.0)?.item();
        let pass = perfect < 1e-4 && (ce - (k as f64).ln()).abs() < 1e-12;
        push(
            &mut out,
            "loss_calibration",
            pass,
            format!("perfect {perfect:.3e}, uniform CE {ce:.12} vs ln {k} {:.12}", (k as f64).ln()),
        );
    }

    {
        // Sliding-window starts: pinned rule plus coverage on random cases.
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let mut pass = window_starts(120, 96, 0.5)? == vec![0, 24];
        let mut detail = format!("starts(120, 96, 0.5) = {:?}", window_starts(120, 96, 0.5)?);
        for _ in 0..30 {
            let window = rng.gen_range(2..=32);
            let extent = window + rng.gen_range(0..48);
            let overlap = rng.gen_range(0.0..0.95);
            let starts = window_starts(extent, window, overlap)?;
            let covered = starts.first() == Some(&0)
                && starts.last() == Some(&(extent - window))
                && starts.windows(2).all(|p| {
                    p[1] > p[0] && p[1] - p[0] <= window
                });
            if !covered {
                pass = false;
                detail = format!("extent {extent} window {window} overlap {overlap:.2}: {starts:?}");
            }
        }
        push(&mut out, "window_starts_cover_the_extent", pass, detail);
    }

    {
        // Metric conventions on tiny volumes.
        let lab = |set: &[([usize; 3], f64)]| -> Result<Volume> {
            let mut data = vec![0.0; 6 * 6 * 6];
            for &([i, j, k], c) in set {
                data[(i * 6 + j) * 6 + k] = c;
            }
            Volume::new([6, 6, 6], [1.0; 3], VolumeKind::Label, data)
        };
        let a = lab(&[([0, 0, 0], 1.0)])?;
        let b = lab(&[([3, 0, 0], 1.0)])?;
        let empty = lab(&[])?;
        let pass = dsc(&a, &a, 1)? == 1.0
            && dsc(&a, &b, 1)? == 0.0
            && dsc(&empty, &empty, 1)? == 1.0
            && dsc(&a, &empty, 1)? == 0.0
            && hausdorff(&a, &b, 1)? == 3.0
            && hausdorff(&a, &empty, 1)? == f64::INFINITY
            && hausdorff(&empty, &empty, 1)? == 0.0;
        push(
            &mut out,
            "metric_conventions",
            pass,
            format!(
                "dsc(a,a) {} hd(a,b) {} hd(a,empty) {}",
                dsc(&a, &a, 1)?,
                hausdorff(&a, &b, 1)?,
                hausdorff(&a, &empty, 1)?
            ),
        );
    }

    {
        // Two builds from one seed agree bitwise, and so do their forwards.
        let config = ModelConfig { window: [8; 3], ..ModelConfig::micro() };
        let m1 = Model::<f64>::build(&config, 9)?;
        let m2 = Model::<f64>::build(&config, 9)?;
        let params_equal = m1
            .params()
            .iter()
            .zip(m2.params())
            .all(|((an, ap), (bn, bp))| an == bn && ap.to_vec() == bp.to_vec());
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let x = Tensor::from_vec(uniform(&mut rng, 512, -1.0, 1.0), &[1, 1, 8, 8, 8])?;
        let y1 = m1.forward(&x)?.to_vec();
        let y2 = m2.forward(&x)?.to_vec();
        push(
            &mut out,
            "seeded_build_and_forward_determinism",
            params_equal && y1 == y2,
            format!("params equal: {params_equal}, forwards equal: {}", y1 == y2),
        );
    }

    Ok(out)
}
