//! Traces the learning-rate schedule (linear warmup into cosine decay) and
//! shows how subjects are assigned to cross-validation folds by a stable
//! hash of their id.
//!
//!     cargo run --example schedule

use unest::train::{fold_of, fold_split, lr_schedule, TrainConfig};
use unest::Result;

fn main() -> Result<()> {
    let cfg = TrainConfig { peak_lr: 1e-4, warmup_steps: 500, total_steps: 5000, ..TrainConfig::default() };
    println!("peak {:.0e}, {} warmup steps, {} total", cfg.peak_lr, cfg.warmup_steps, cfg.total_steps);
    for step in [0, 125, 250, 500, 1000, 2750, 4000, 5000] {
        let lr = lr_schedule(step, &cfg);
        let bar = "#".repeat((lr / cfg.peak_lr * 40.0).round() as usize);
        println!("  step {step:>5}  lr {lr:.3e}  {bar}");
    }
    assert_eq!(lr_schedule(0, &cfg), 0.0);
    assert_eq!(lr_schedule(cfg.warmup_steps, &cfg), cfg.peak_lr);
    assert_eq!(lr_schedule(cfg.total_steps, &cfg), 0.0);

    // Fold membership depends only on the id, so it survives reordering,
    // additions, and removals of other subjects.
    let ids: Vec<String> = (0..10).map(|i| format!("subject-{i:03}")).collect();
    println!();
    for id in &ids {
        print!("{} -> fold {}  ", id, fold_of(id, 5));
    }
    println!();
    let (train_idx, val_idx) = fold_split(&ids, 2, 5)?;
    println!("holding out fold 2 of 5: train {train_idx:?}, validate {val_idx:?}");
    for i in &val_idx {
        assert_eq!(fold_of(&ids[*i], 5), 2);
    }
    Ok(())
}
