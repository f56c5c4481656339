//! Saves a model, reads the header back without touching the payload, and
//! reloads the weights bit for bit, including across float widths.
//!
//!     cargo run --example checkpoints

use unest::checkpoint::{load, read_header, save};
use unest::model::{Model, ModelConfig};
use unest::tensor::{no_grad, Tensor};
use unest::Result;

fn main() -> Result<()> {
    let dir = std::env::temp_dir().join("unest-checkpoints-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.unst");

    let config = ModelConfig::micro();
    let model = Model::<f64>::build(&config, 42)?;
    save(&model, 1234, &path)?;
    println!("saved {} parameters to {}", model.count_params(), path.display());

    // The header alone carries the config and step counter, enough for a
    // tool to describe a checkpoint without loading megabytes of weights.
    let (stored, step) = read_header(&path)?;
    assert_eq!(stored, config);
    println!("header: step {step}, {} hierarchy levels, window {:?}", stored.levels(), stored.window);

    let (restored, step) = load::<f64>(&path)?;
    assert_eq!(step, 1234);
    for ((name, a), (_, b)) in model.params().iter().zip(restored.params()) {
        assert_eq!(a.to_vec(), b.to_vec(), "{name} differs");
    }
    println!("reload: every tensor restored bitwise");

    // Forward passes agree exactly because the weights do.
    let vox: usize = config.window.iter().product();
    let input = Tensor::from_vec((0..vox).map(|i| (i % 7) as f64 / 7.0).collect(), &[1, 1, 16, 16, 16])?;
    let (a, b) = no_grad(|| -> Result<_> {
        Ok((model.forward(&input)?.to_vec(), restored.forward(&input)?.to_vec()))
    })?;
    assert_eq!(a, b);
    println!("forward passes agree bitwise");

    // Loading into f32 narrows each value; the config still has to match.
    let (narrow, _) = load::<f32>(&path)?;
    let first = narrow.params()[0].1.to_vec()[0];
    println!("loaded the same file as f32: first weight {first}");

    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
