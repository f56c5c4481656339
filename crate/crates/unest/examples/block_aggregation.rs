//! Shows the hierarchical block geometry: how a feature volume splits into
//! a g^3 grid of token blocks, round-trips losslessly, and shrinks level by
//! level until one block attends over the whole window.
//!
//!     cargo run --example block_aggregation

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unest::encoder::{blockify, unblockify};
use unest::model::{ModelConfig, Scale};
use unest::tensor::Tensor;
use unest::Result;

fn main() -> Result<()> {
    let config = ModelConfig::scale(Scale::B);
    let [h, w, d] = config.window;
    println!("scale B, window {h}x{w}x{d}, patch {}", config.patch);
    for level in 0..config.levels() {
        let (g, t, n) = config.block_geometry(level)?;
        println!("  hierarchy {level}: grid {g}^3 = {t} blocks, {n} tokens each, width {}", config.widths[level]);
    }

    // A blockified volume keeps every value; unblockify restores the exact
    // bit pattern, which is what lets the decoder reuse encoder features.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (b, c, spatial) = (2, 3, [8, 12, 4]);
    let numel = b * c * spatial.iter().product::<usize>();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let volume = Tensor::from_vec(data.clone(), &[b, c, spatial[0], spatial[1], spatial[2]])?;

    for g in [1, 2, 4] {
        let blocks = blockify(&volume, g)?;
        let back = unblockify(&blocks, g, spatial)?;
        assert_eq!(back.to_vec(), data);
        println!("g = {g}: {:?} -> {:?} -> restored bitwise", volume.shape(), blocks.shape());
    }

    // Gradients flow through the reshuffle untouched: backprop through a
    // blockify/unblockify pair is the identity on the upstream gradient.
    let leaf = Tensor::<f64>::param(data, &[b, c, spatial[0], spatial[1], spatial[2]])?;
    let loss = unblockify(&blockify(&leaf, 2)?, 2, spatial)?.mul(&leaf)?.sum_all();
    loss.backward()?;
    let grad = leaf.grad().expect("leaf gradient");
    let expect: Vec<f64> = leaf.to_vec().iter().map(|v| 2.0 * v).collect();
    assert_eq!(grad, expect);
    println!("gradient through the round-trip matches 2x the input exactly");
    Ok(())
}
