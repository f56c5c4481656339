//! Sliding-window tiling, fusion, ensembling, and label extraction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unest::infer::{argmax_labels, ensemble, sliding_window, window_starts};
use unest::model::{Model, ModelConfig};
use unest::tensor::{no_grad, Tensor};
use unest::volume::{Volume, VolumeKind};

fn micro(window: [usize; 3], classes: usize) -> Model<f64> {
    Model::build(&ModelConfig { window, classes, ..ModelConfig::micro() }, 77).unwrap()
}

/// Overwrites the head so logits are `bias` everywhere, whatever the input.
fn make_constant(model: &Model<f64>, bias: &[f64]) {
    model.param("decoder.head.weight").unwrap().update_data(|d| d.fill(0.0));
    model
        .param("decoder.head.bias")
        .unwrap()
        .update_data(|d| d.copy_from_slice(bias));
}

fn noise_volume(extents: [usize; 3], seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = extents.iter().product();
    let data = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    Volume::new(extents, [1.0; 3], VolumeKind::Intensity, data).unwrap()
}

#[test]
fn start_positions_match_pinned_cases() {
    assert_eq!(window_starts(96, 96, 0.5).unwrap(), vec![0]);
    assert_eq!(window_starts(120, 96, 0.5).unwrap(), vec![0, 24]);
    assert_eq!(window_starts(100, 50, 0.5).unwrap(), vec![0, 25, 50]);
    assert_eq!(window_starts(17, 16, 0.5).unwrap(), vec![0, 1]);
    // Extreme overlap still advances by at least one voxel.
    assert_eq!(window_starts(18, 16, 0.99).unwrap(), vec![0, 1, 2]);
    assert!(window_starts(10, 16, 0.5).is_err());
    assert!(window_starts(100, 50, 1.0).is_err());
    assert!(window_starts(100, 50, -0.1).is_err());
}

#[test]
fn start_positions_match_enumeration_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let window = rng.gen_range(4..40);
        let extent = window + rng.gen_range(0..80);
        let overlap = rng.gen_range(0.0..0.95);
        let got = window_starts(extent, window, overlap).unwrap();

        // Oracle: walk the stated rule naively.
        let s = ((window as f64 * (1.0 - overlap)).round() as usize).max(1);
        let mut want = Vec::new();
        let mut k = 0;
        loop {
            let pos = k * s;
            if pos >= extent - window {
                want.push(extent - window);
                break;
            }
            want.push(pos);
            k += 1;
        }
        assert_eq!(got, want, "extent {extent} window {window} overlap {overlap}");

        // Every voxel is covered and starts strictly increase.
        let mut covered = vec![false; extent];
        for &p in &got {
            covered[p..p + window].iter_mut().for_each(|c| *c = true);
        }
        assert!(covered.iter().all(|&c| c));
        assert!(got.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn single_window_volume_equals_direct_forward() {
    let model = micro([16; 3], 2);
    let vol = noise_volume([16; 3], 1);
    let fused = sliding_window(&model, &vol, 0.5, 1).unwrap();
    assert_eq!(fused.shape(), &[2, 16, 16, 16]);

    let input = Tensor::from_vec(vol.data.clone(), &[1, 1, 16, 16, 16]).unwrap();
    let direct = no_grad(|| {
        model
            .forward(&input)
            .unwrap()
            .reshape(&[2, 16 * 16 * 16])
            .unwrap()
            .softmax(0)
            .unwrap()
    });
    assert_eq!(fused.to_vec(), direct.to_vec());
}

#[test]
fn constant_model_is_tiling_invariant() {
    let model = micro([16; 3], 3);
    let bias = [0.3, -0.2, 0.1];
    make_constant(&model, &bias);
    let want: Vec<f64> = {
        let z: f64 = bias.iter().map(|b| b.exp()).sum();
        bias.iter().map(|b| b.exp() / z).collect()
    };

    let vol = noise_volume([24, 20, 16], 2);
    for overlap in [0.25, 0.5] {
        let fused = sliding_window(&model, &vol, overlap, 1).unwrap();
        assert_eq!(fused.shape(), &[3, 24, 20, 16]);
        let nvox = 24 * 20 * 16;
        let data = fused.to_vec();
        for v in 0..nvox {
            let mut sum = 0.0;
            for c in 0..3 {
                assert!((data[c * nvox + v] - want[c]).abs() < 1e-12, "overlap {overlap}");
                sum += data[c * nvox + v];
            }
            assert!((sum - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn small_volumes_are_padded_and_cropped_back() {
    let model = micro([16; 3], 2);
    make_constant(&model, &[1.0, 0.0]);
    let vol = noise_volume([10, 16, 21], 3);
    let fused = sliding_window(&model, &vol, 0.5, 1).unwrap();
    assert_eq!(fused.shape(), &[2, 10, 16, 21]);
    let p0 = 1.0f64.exp() / (1.0f64.exp() + 1.0);
    assert!(fused.to_vec()[..10 * 16 * 21].iter().all(|p| (p - p0).abs() < 1e-12));
}

#[test]
fn fused_probabilities_sum_to_one_on_a_real_model() {
    let model = micro([16; 3], 3);
    let vol = noise_volume([24; 3], 4);
    let fused = sliding_window(&model, &vol, 0.5, 1).unwrap();
    let nvox = 24 * 24 * 24;
    let data = fused.to_vec();
    for v in 0..nvox {
        let sum: f64 = (0..3).map(|c| data[c * nvox + v]).sum();
        assert!((sum - 1.0).abs() < 1e-5, "voxel {v}: {sum}");
    }
}

#[test]
fn thread_count_does_not_change_the_result() {
    let model = micro([16; 3], 2);
    let vol = noise_volume([24, 17, 16], 5);
    let one = sliding_window(&model, &vol, 0.5, 1).unwrap();
    for threads in [2, 3, 8] {
        let many = sliding_window(&model, &vol, 0.5, threads).unwrap();
        assert_eq!(one.to_vec(), many.to_vec(), "threads {threads}");
    }
}

#[test]
fn ensemble_is_the_voxelwise_mean() {
    let a = Tensor::from_vec(vec![0.6f64, 0.4], &[2, 1, 1, 1]).unwrap();
    let b = Tensor::from_vec(vec![0.2f64, 0.8], &[2, 1, 1, 1]).unwrap();
    let mean = ensemble(&[a.clone(), b]).unwrap();
    let got = mean.to_vec();
    assert!((got[0] - 0.4).abs() < 1e-12 && (got[1] - 0.6).abs() < 1e-12);

    // One map passes through bitwise; repeated maps average to themselves.
    assert_eq!(ensemble(std::slice::from_ref(&a)).unwrap().to_vec(), a.to_vec());
    let same = ensemble(&[a.clone(), a.clone(), a.clone()]).unwrap();
    for (g, w) in same.to_vec().into_iter().zip(a.to_vec()) {
        assert!((g - w).abs() < 1e-12);
    }

    let c = Tensor::<f64>::full(&[2, 2, 1, 1], 0.5);
    assert!(ensemble(&[a, c]).is_err());
    assert!(ensemble::<f64>(&[]).is_err());
}

#[test]
fn labels_take_the_argmax_with_low_ties() {
    // 3 classes, 4 voxels: clear winners, then ties.
    let probs = Tensor::from_vec(
        vec![
            0.1, 0.7, 1.0 / 3.0, 0.4, // class 0
            0.8, 0.1, 1.0 / 3.0, 0.4, // class 1
            0.1, 0.2, 1.0 / 3.0, 0.2, // class 2
        ],
        &[3, 1, 2, 2],
    )
    .unwrap();
    let labels = argmax_labels(&probs, [1.0, 1.0, 2.0]).unwrap();
    assert_eq!(labels.kind, VolumeKind::Label);
    assert_eq!(labels.extents, [1, 2, 2]);
    assert_eq!(labels.spacing, [1.0, 1.0, 2.0]);
    assert_eq!(labels.data, vec![1.0, 0.0, 0.0, 0.0]);

    // Ensemble of disagreeing one-hot maps. Three voters, two voxels:
    // voxel 0 splits 1 vs 2 for class 1; voxel 1 splits 2 vs 1 for class 0.
    let m1 = Tensor::from_vec(vec![1.0, 1.0, 0.0, 0.0], &[2, 1, 1, 2]).unwrap();
    let m2 = Tensor::from_vec(vec![0.0, 0.0, 1.0, 1.0], &[2, 1, 1, 2]).unwrap();
    let m3 = Tensor::from_vec(vec![0.0, 1.0, 1.0, 0.0], &[2, 1, 1, 2]).unwrap();
    let fused = ensemble(&[m1.clone(), m2.clone(), m3]).unwrap();
    let labels = argmax_labels(&fused, [1.0; 3]).unwrap();
    assert_eq!(labels.data, vec![1.0, 0.0]);

    // Two voters disagreeing on voxel 0: exact tie, lowest class wins.
    let tied = ensemble(&[m1, m2]).unwrap();
    let labels = argmax_labels(&tied, [1.0; 3]).unwrap();
    assert_eq!(labels.data, vec![0.0, 0.0]);

    assert!(argmax_labels(&Tensor::<f64>::full(&[2, 2], 0.5), [1.0; 3]).is_err());
}
