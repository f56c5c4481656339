//! Builds a small expression graph, backpropagates through it, and compares
//! every analytic gradient against central finite differences.
//!
//!     cargo run --example autodiff

use unest::tensor::{grad_check, Tensor};
use unest::Result;

fn main() -> Result<()> {
    // Cross-entropy on gelu(x W + b): a miniature of the attention/MLP
    // plumbing the model is made of, reduced by picking one class per row.
    let x = Tensor::<f64>::param(vec![0.3, -1.2, 0.8, 0.05, 1.4, -0.7], &[2, 3])?;
    let w = Tensor::<f64>::param(vec![0.1, -0.4, 0.9, 0.2, -0.3, 0.6, -0.8, 0.5, 0.7], &[3, 3])?;
    let b = Tensor::<f64>::param(vec![0.05, -0.1, 0.2], &[3])?;
    // One-hot picks for rows 0 and 1; a constant, so not in the check list.
    let pick = Tensor::from_vec(vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[2, 3])?;

    let loss = x.matmul(&w)?.bias_add(&b)?.gelu().log_softmax(1)?.mul(&pick)?.mean_all().mul_scalar(-1.0);
    println!("loss = {:.12}", loss.item());

    loss.backward()?;
    for (name, t) in [("x", &x), ("w", &w), ("b", &b)] {
        let g = t.grad().expect("leaf gradient");
        let norm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("d loss / d {name}: {} values, l2 norm {norm:.6}", g.len());
    }

    // The same expression as a closure so the checker can rebuild it after
    // each probe perturbation. Zero probe budget means every element.
    let report = grad_check(
        || Ok(x.matmul(&w)?.bias_add(&b)?.gelu().log_softmax(1)?.mul(&pick)?.mean_all().mul_scalar(-1.0)),
        &[("x", &x), ("w", &w), ("b", &b)],
        1e-5,
        0,
    )?;
    println!("finite differences: {report}");
    assert!(report.max_rel_err < 1e-8);
    println!("analytic gradients agree with finite differences");
    Ok(())
}
