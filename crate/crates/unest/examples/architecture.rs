//! Prints the analytic parameter and FLOP budgets for every scale preset
//! and proves the analytic count against an actually built model.
//!
//!     cargo run --example architecture

use unest::model::{Model, ModelConfig, Scale};
use unest::Result;

fn main() -> Result<()> {
    for scale in [Scale::S, Scale::B, Scale::L] {
        let config = ModelConfig::scale(scale);
        let params = config.param_report()?;
        let flops = config.flops_report()?;
        let [h, w, d] = config.window;
        println!(
            "scale {scale}: {:.1}M parameters, {:.1} GFLOPs per {h}x{w}x{d} window",
            params.total as f64 / 1e6,
            flops.total as f64 / 1e9
        );
        println!("  depths {:?}, heads {:?}, widths {:?}", config.depths, config.heads, config.widths);
        println!("  attention flops per hierarchy: {:?}", flops.attention);
    }

    // The micro preset is small enough to build here and count directly.
    let config = ModelConfig::micro();
    let model = Model::<f32>::build(&config, 0)?;
    let analytic = config.param_report()?;
    assert_eq!(model.count_params(), analytic.total);
    println!();
    println!("micro preset: analytic count {} == built count {}", analytic.total, model.count_params());
    println!("largest groups:");
    let mut groups = analytic.groups.clone();
    groups.sort_by_key(|(_, n)| std::cmp::Reverse(*n));
    for (name, count) in groups.iter().take(5) {
        println!("  {name:<22} {count:>8}");
    }

    // Turning block aggregation off keeps every weight but makes hierarchy 0
    // attend globally, multiplying its attention cost by the block count.
    let ablated = ModelConfig { block_aggregation: false, ..ModelConfig::scale(Scale::B) };
    let on = ModelConfig::scale(Scale::B).flops_report()?;
    let off = ablated.flops_report()?;
    assert_eq!(ablated.param_report()?.total, ModelConfig::scale(Scale::B).param_report()?.total);
    println!();
    println!(
        "scale B ablation, hierarchy-0 attention: {} -> {} flops ({}x)",
        on.attention[0],
        off.attention[0],
        off.attention[0] / on.attention[0]
    );
    Ok(())
}
