//! Every differentiable primitive against central differences (64-bit),
//! plus hand-computed forward oracles for the trickier kernels.

use unest::selftest::gradcheck_ops;
use unest::tensor::Tensor;

#[test]
fn all_primitive_gradients_match_central_differences() {
    let checks = gradcheck_ops().expect("suite runs");
    assert!(!checks.is_empty());
    let mut failures = Vec::new();
    for c in &checks {
        if c.report.max_rel_err >= 1e-4 {
            failures.push(format!("{}: {}", c.name, c.report));
        }
    }
    assert!(failures.is_empty(), "gradient mismatches:\n{}", failures.join("\n"));
}

#[test]
fn backward_accumulates_over_reused_operands() {
    // y = sum(x * x): dy/dx = 2x.
    let x = Tensor::<f64>::param(vec![1.0, -2.0, 3.0], &[3]).unwrap();
    let y = x.mul(&x).unwrap().sum_all();
    y.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 6.0]);
}

#[test]
fn backward_requires_scalar_root() {
    let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
    let y = x.mul_scalar(2.0);
    let err = y.backward().unwrap_err();
    assert!(err.to_string().contains("scalar"), "got: {err}");
}

#[test]
fn backward_through_argmax_is_an_error() {
    let x = Tensor::<f64>::param(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
    let y = x.argmax_axis(1).unwrap().sum_all();
    let err = y.backward().unwrap_err();
    assert!(err.to_string().contains("argmax"), "got: {err}");
}

#[test]
fn backward_on_untracked_root_is_an_error() {
    let x = Tensor::<f64>::from_vec(vec![1.0], &[]).unwrap();
    assert!(x.backward().is_err());
}

#[test]
fn gradients_accumulate_across_backward_calls_until_zeroed() {
    let x = Tensor::<f64>::param(vec![2.0], &[1]).unwrap();
    for _ in 0..2 {
        x.mul_scalar(3.0).sum_all().backward().unwrap();
    }
    assert_eq!(x.grad().unwrap(), vec![6.0]);
    x.zero_grad();
    assert_eq!(x.grad(), None);
    x.mul_scalar(3.0).sum_all().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![3.0]);
}

#[test]
fn detached_branches_get_no_gradient() {
    let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
    let y = x.detach().mul(&x).unwrap().sum_all();
    y.backward().unwrap();
    // Only the tracked side contributes: d/dx sum(c * x) = c = detached x.
    assert_eq!(x.grad().unwrap(), vec![1.0, 2.0]);
}

#[test]
fn conv3d_matches_hand_computation() {
    // 1x1x(2,2,2) input, 1 output channel, k=2 s=1 p=0: plain dot product.
    let x = Tensor::<f64>::from_vec((1..=8).map(f64::from).collect(), &[1, 1, 2, 2, 2]).unwrap();
    let w = Tensor::<f64>::from_vec(vec![0.5; 8], &[1, 1, 2, 2, 2]).unwrap();
    let b = Tensor::<f64>::from_vec(vec![0.25], &[1]).unwrap();
    let y = x.conv3d(&w, &b, [1, 1, 1], [0, 0, 0]).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1, 1, 1]);
    assert_eq!(y.item(), 0.5 * 36.0 + 0.25);
}

#[test]
fn conv3d_padding_reads_zeros() {
    // Single voxel input, k=3 p=1: every kernel tap except the center is
    // out of bounds, so the output is x * w_center + b.
    let x = Tensor::<f64>::from_vec(vec![2.0], &[1, 1, 1, 1, 1]).unwrap();
    let w = Tensor::<f64>::from_vec((0..27).map(f64::from).collect(), &[1, 1, 3, 3, 3]).unwrap();
    let b = Tensor::<f64>::from_vec(vec![1.0], &[1]).unwrap();
    let y = x.conv3d(&w, &b, [1, 1, 1], [1, 1, 1]).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1, 1, 1]);
    assert_eq!(y.item(), 2.0 * 13.0 + 1.0);
}

#[test]
fn conv_transpose3d_k2s2_upsamples_disjointly() {
    // With k = s = 2 each input voxel paints its own 2x2x2 output block.
    let x = Tensor::<f64>::from_vec(vec![1.0, 10.0], &[1, 1, 1, 1, 2]).unwrap();
    let w = Tensor::<f64>::from_vec((1..=8).map(f64::from).collect(), &[1, 1, 2, 2, 2]).unwrap();
    let b = Tensor::<f64>::from_vec(vec![0.0], &[1]).unwrap();
    let y = x.conv_transpose3d(&w, &b, [2, 2, 2], [0, 0, 0]).unwrap();
    assert_eq!(y.shape(), &[1, 1, 2, 2, 4]);
    let d = y.to_vec();
    // Block of voxel 0 occupies depth 0..2, voxel 1 depth 2..4.
    // Weight layout is (k0, k1, k2) row-major: w[a][bb][c] = 1 + 4a + 2bb + c.
    for a in 0..2 {
        for bb in 0..2 {
            for c in 0..2 {
                let wv = (1 + 4 * a + 2 * bb + c) as f64;
                assert_eq!(d[(a * 2 + bb) * 4 + c], wv);
                assert_eq!(d[(a * 2 + bb) * 4 + 2 + c], 10.0 * wv);
            }
        }
    }
}

#[test]
fn max_pool_takes_first_max_and_routes_gradient() {
    let x = Tensor::<f64>::param(vec![3.0, 1.0, 3.0, 2.0, 0.0, -1.0, -2.0, -3.0], &[1, 1, 2, 2, 2]).unwrap();
    let y = x.max_pool3d([2, 2, 2], [2, 2, 2]).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1, 1, 1]);
    assert_eq!(y.item(), 3.0);
    y.sum_all().backward().unwrap();
    // Ties resolve to the first element in scan order.
    assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
}

#[test]
fn softmax_rows_sum_to_one() {
    let x = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0], &[2, 3]).unwrap();
    let y = x.softmax(1).unwrap();
    let d = y.to_vec();
    for r in 0..2 {
        let s: f64 = d[r * 3..(r + 1) * 3].iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    // Shift invariance: rows differ by a constant, so distributions match.
    for j in 0..3 {
        assert!((d[j] - d[3 + j]).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_normalizes_rows() {
    let x = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0], &[2, 4]).unwrap();
    let scale = Tensor::<f64>::from_vec(vec![1.0; 4], &[4]).unwrap();
    let shift = Tensor::<f64>::from_vec(vec![0.0; 4], &[4]).unwrap();
    let y = x.layer_norm(&scale, &shift, 1e-12).unwrap();
    let d = y.to_vec();
    for r in 0..2 {
        let row = &d[r * 4..(r + 1) * 4];
        let mean: f64 = row.iter().sum::<f64>() / 4.0;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-9, "row {r} mean {mean}");
        assert!((var - 1.0).abs() < 1e-6, "row {r} var {var}");
    }
}

#[test]
fn matmul_matches_hand_computation() {
    let a = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
    let b = Tensor::<f64>::from_vec(vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0], &[3, 2]).unwrap();
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.to_vec(), vec![58.0, 64.0, 139.0, 154.0]);
}

#[test]
fn shape_mismatches_are_reported() {
    let a = Tensor::<f64>::zeros(&[2, 3]);
    let b = Tensor::<f64>::zeros(&[3, 2]);
    assert!(a.add(&b).is_err());
    assert!(a.matmul(&a).is_err());
    assert!(a.reshape(&[5]).is_err());
    assert!(a.permute(&[0, 0]).is_err());
    assert!(a.slice(&[0, 2], &[1, 2]).is_err());
    let x = Tensor::<f64>::zeros(&[1, 2, 4, 4, 4]);
    let w = Tensor::<f64>::zeros(&[3, 5, 3, 3, 3]);
    let bias = Tensor::<f64>::zeros(&[3]);
    let err = x.conv3d(&w, &bias, [1; 3], [1; 3]).unwrap_err().to_string();
    assert!(err.contains("channels"), "got: {err}");
}
