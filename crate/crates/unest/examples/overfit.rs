//! Overfits the micro preset on a single synthetic phantom until the
//! prediction matches the label map, then scores it: the standard smoke
//! test that the whole train/infer/metric path is wired correctly.
//!
//!     cargo run --release --example overfit

use unest::infer::{argmax_labels, sliding_window};
use unest::metrics::dsc;
use unest::model::{Model, ModelConfig};
use unest::train::{train, Sample, TrainConfig, TrainOptions};
use unest::Result;

fn main() -> Result<()> {
    let window = [16; 3];
    let classes = 3;
    let config = ModelConfig { window, classes, ..ModelConfig::micro() };
    let cfg = TrainConfig {
        peak_lr: 2e-3,
        warmup_steps: 20,
        total_steps: 200,
        window,
        weight_decay: 0.0,
        seed: 7,
        ..TrainConfig::default()
    };

    let (image, label) = unest::train::synthetic_volume(window, classes, cfg.seed)?;
    let sample = Sample { id: "phantom".into(), image, label };

    let mut model = Model::<f32>::build(&config, cfg.seed)?;
    println!("{} parameters, {} steps on one {}^3 phantom", model.count_params(), cfg.total_steps, window[0]);

    let opts = TrainOptions::default();
    let report = train(&mut model, std::slice::from_ref(&sample), &cfg, &opts)?;
    for (step, loss) in report.losses.iter().enumerate().step_by(25) {
        println!("  step {step:>4}  loss {loss:.4}");
    }
    println!("  final loss {:.4}", report.losses.last().unwrap());

    let probs = sliding_window(&model, &sample.image, 0.5, 1)?;
    let pred = argmax_labels(&probs, sample.image.spacing)?;
    for class in 1..classes {
        println!("class {class}: dsc {:.4}", dsc(&pred, &sample.label, class)?);
    }
    Ok(())
}
