//! Central-difference verification of analytic gradients.

use super::{rel_err, Element, Tensor};
use crate::error::Result;

/// Worst observed disagreement between analytic and numeric derivatives.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub probes: usize,
    /// (parameter name, flat index, analytic, numeric) for the worst probe.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.worst {
            Some((name, idx, a, n)) => write!(
                f,
                "max rel err {:.3e} over {} probes (worst: {}[{}] analytic {:.6e} vs numeric {:.6e})",
                self.max_rel_err, self.probes, name, idx, a, n
            ),
            None => write!(f, "no probes"),
        }
    }
}

/// Compares `backward` gradients of the scalar `loss()` against central
/// differences. `loss` must rebuild its graph from the given leaf parameters
/// on every call; their data is perturbed in place and restored. At most
/// `max_probes` evenly spaced elements are probed per parameter (0 = all).
/// The step is `eps * max(1, |x|)` per element.
pub fn grad_check<E: Element>(
    mut loss: impl FnMut() -> Result<Tensor<E>>,
    params: &[(&str, &Tensor<E>)],
    eps: f64,
    max_probes: usize,
) -> Result<GradCheckReport> {
    for (_, p) in params {
        p.zero_grad();
    }
    let root = loss()?;
    root.backward()?;
    let analytic: Vec<Vec<E>> = params
        .iter()
        .map(|(_, p)| p.grad().unwrap_or_else(|| vec![E::ZERO; p.numel()]))
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        probes: 0,
        worst: None,
    };
    for ((name, p), grads) in params.iter().zip(&analytic) {
        let n = p.numel();
        let probe_count = if max_probes == 0 { n } else { n.min(max_probes) };
        for j in 0..probe_count {
            let i = if probe_count == n { j } else { j * n / probe_count };
            let orig = p.data()[i];
            let h = E::from_f64(eps * orig.to_f64().abs().max(1.0));
            p.update_data(|d| d[i] = orig + h);
            let up = loss()?.item().to_f64();
            p.update_data(|d| d[i] = orig - h);
            let down = loss()?.item().to_f64();
            p.update_data(|d| d[i] = orig);
            let numeric = (up - down) / (2.0 * h.to_f64());
            let a = grads[i].to_f64();
            let e = rel_err(a, numeric);
            report.probes += 1;
            if e >= report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((name.to_string(), i, a, numeric));
            }
        }
    }
    Ok(report)
}
