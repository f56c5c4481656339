//! Segments a volume larger than the model window by tiling it with
//! overlapping windows, fusing the per-window probabilities, and averaging
//! an ensemble of two models before the argmax.
//!
//!     cargo run --example sliding_window

use unest::infer::{argmax_labels, ensemble, sliding_window, window_starts};
use unest::model::{Model, ModelConfig};
use unest::train::synthetic_volume;
use unest::Result;

fn main() -> Result<()> {
    let config = ModelConfig::micro();
    let (image, _) = synthetic_volume([28, 24, 20], config.classes, 3)?;
    let [h, w, d] = image.extents;
    println!("volume {h}x{w}x{d}, model window {:?}, overlap 0.5", config.window);
    for (axis, extent) in image.extents.iter().enumerate() {
        let starts = window_starts(*extent, config.window[axis], 0.5)?;
        println!("  axis {axis}: window starts {starts:?}");
    }

    // Two differently seeded models stand in for an ensemble of folds.
    let a = Model::<f32>::build(&config, 1)?;
    let b = Model::<f32>::build(&config, 2)?;
    let map_a = sliding_window(&a, &image, 0.5, 1)?;
    let map_b = sliding_window(&b, &image, 0.5, 1)?;

    // Each fused map is a probability field: classes sum to one everywhere.
    let vox = image.numel();
    let sums = map_a.to_vec();
    let mut worst: f32 = 0.0;
    for v in 0..vox {
        let s: f32 = (0..config.classes).map(|k| sums[k * vox + v]).sum();
        worst = worst.max((s - 1.0).abs());
    }
    println!("fused map {:?}, worst |class sum - 1| = {worst:.2e}", map_a.shape());

    let fused = ensemble(&[map_a, map_b])?;
    let labels = argmax_labels(&fused, image.spacing)?;
    let mut counts = vec![0usize; config.classes];
    for v in &labels.data {
        counts[*v as usize] += 1;
    }
    println!("ensemble of 2 -> label volume {:?}, voxels per class {counts:?}", labels.extents);
    Ok(())
}
