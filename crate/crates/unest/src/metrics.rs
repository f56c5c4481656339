//! Evaluation statistics: per-class DSC, symmetric Hausdorff distance with
//! infinity semantics, cohort volumetrics, and Bland-Altman agreement.

use crate::error::{Error, Result};
use crate::volume::Volume;

/// Dice similarity 2|A∩B| / (|A| + |B|) for one class. Both sets empty is
/// perfect agreement (1); exactly one empty is total disagreement (0).
pub fn dsc(pred: &Volume, truth: &Volume, class: usize) -> Result<f64> {
    if pred.extents != truth.extents {
        return Err(Error::metric(format!(
            "extent mismatch: {:?} vs {:?}",
            pred.extents, truth.extents
        )));
    }
    let c = class as f64;
    let mut a = 0usize;
    let mut b = 0usize;
    let mut inter = 0usize;
    for (p, t) in pred.data.iter().zip(&truth.data) {
        let (ip, it) = (*p == c, *t == c);
        a += ip as usize;
        b += it as usize;
        inter += (ip && it) as usize;
    }
    Ok(match (a, b) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => 2.0 * inter as f64 / (a + b) as f64,
    })
}

/// Boundary voxels of `data == class`: foreground with at least one
/// six-connected background neighbor, where out-of-bounds counts as
/// background.
fn boundary(data: &[f64], extents: [usize; 3], class: usize) -> Vec<bool> {
    let [e0, e1, e2] = extents;
    let c = class as f64;
    let fg = |i: usize, j: usize, k: usize| data[(i * e1 + j) * e2 + k] == c;
    let mut out = vec![false; data.len()];
    for i in 0..e0 {
        for j in 0..e1 {
            for k in 0..e2 {
                if !fg(i, j, k) {
                    continue;
                }
                let edge = i == 0
                    || j == 0
                    || k == 0
                    || i == e0 - 1
                    || j == e1 - 1
                    || k == e2 - 1
                    || !fg(i - 1, j, k)
                    || !fg(i + 1, j, k)
                    || !fg(i, j - 1, k)
                    || !fg(i, j + 1, k)
                    || !fg(i, j, k - 1)
                    || !fg(i, j, k + 1);
                if edge {
                    out[(i * e1 + j) * e2 + k] = true;
                }
            }
        }
    }
    out
}

/// Physical distance between two voxel indices: scale each axis offset by
/// its spacing, square, and sum left to right. Every distance this module
/// reports is computed by this one expression.
fn canonical_dist(a: [usize; 3], b: [usize; 3], spacing: [f64; 3]) -> f64 {
    let mut d2 = 0.0;
    for axis in 0..3 {
        let d = (a[axis] as f64 - b[axis] as f64) * spacing[axis];
        d2 += d * d;
    }
    d2.sqrt()
}

const NO_FEATURE: [usize; 3] = [usize::MAX; 3];

/// Exact nearest-feature transform: for every voxel, the coordinates of the
/// closest `true` voxel (by physical distance), or `NO_FEATURE` when the
/// mask is empty. One lower-envelope pass per axis; the envelope propagates
/// squared distances, and callers recompute the final distance canonically
/// from the returned coordinates.
fn nearest_features(mask: &[bool], extents: [usize; 3], spacing: [f64; 3]) -> Vec<[usize; 3]> {
    let n: usize = extents.iter().product();
    let mut d2 = vec![f64::INFINITY; n];
    let mut feat = vec![NO_FEATURE; n];
    for i in 0..extents[0] {
        for j in 0..extents[1] {
            for k in 0..extents[2] {
                let v = (i * extents[1] + j) * extents[2] + k;
                if mask[v] {
                    d2[v] = 0.0;
                    feat[v] = [i, j, k];
                }
            }
        }
    }

    // strides[axis] in the flat layout (i * e1 + j) * e2 + k.
    let strides = [extents[1] * extents[2], extents[2], 1];
    for axis in 0..3 {
        let len = extents[axis];
        if len == 1 {
            continue;
        }
        let s = spacing[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        let mut line_d2 = vec![0.0f64; len];
        let mut line_feat = vec![NO_FEATURE; len];
        // Parabola sources (line index), envelope boundaries, in one scan line.
        let mut src = vec![0usize; len];
        let mut bound = vec![0.0f64; len + 1];
        for a in 0..extents[others[0]] {
            for b in 0..extents[others[1]] {
                let base = a * strides[others[0]] + b * strides[others[1]];
                let at = |q: usize| base + q * strides[axis];

                let mut m = 0usize;
                for q in 0..len {
                    let f = d2[at(q)];
                    if !f.is_finite() {
                        continue;
                    }
                    let xq = q as f64 * s;
                    loop {
                        if m == 0 {
                            break;
                        }
                        let r = src[m - 1];
                        let xr = r as f64 * s;
                        let cut = ((f + xq * xq) - (d2[at(r)] + xr * xr)) / (2.0 * xq - 2.0 * xr);
                        if cut > bound[m - 1] {
                            bound[m] = cut;
                            break;
                        }
                        m -= 1;
                    }
                    if m == 0 {
                        bound[0] = f64::NEG_INFINITY;
                    }
                    src[m] = q;
                    m += 1;
                    bound[m] = f64::INFINITY;
                }
                if m == 0 {
                    continue;
                }

                let mut k = 0usize;
                for p in 0..len {
                    let xp = p as f64 * s;
                    while bound[k + 1] < xp {
                        k += 1;
                    }
                    let q = src[k];
                    let dx = xp - q as f64 * s;
                    line_d2[p] = dx * dx + d2[at(q)];
                    line_feat[p] = feat[at(q)];
                }
                for p in 0..len {
                    d2[at(p)] = line_d2[p];
                    feat[at(p)] = line_feat[p];
                }
            }
        }
    }
    feat
}

/// Symmetric Hausdorff distance between the class boundaries of two label
/// maps, in physical mm. Exactly one empty boundary set gives +∞, two empty
/// sets give 0.
pub fn hausdorff(pred: &Volume, truth: &Volume, class: usize) -> Result<f64> {
    if pred.extents != truth.extents {
        return Err(Error::metric(format!(
            "extent mismatch: {:?} vs {:?}",
            pred.extents, truth.extents
        )));
    }
    if pred.spacing != truth.spacing {
        return Err(Error::metric(format!(
            "spacing mismatch: {:?} vs {:?}",
            pred.spacing, truth.spacing
        )));
    }
    let extents = pred.extents;
    let spacing = pred.spacing;
    let a = boundary(&pred.data, extents, class);
    let b = boundary(&truth.data, extents, class);
    let has_a = a.iter().any(|&x| x);
    let has_b = b.iter().any(|&x| x);
    match (has_a, has_b) {
        (false, false) => return Ok(0.0),
        (false, true) | (true, false) => return Ok(f64::INFINITY),
        _ => {}
    }

    let directed = |from: &[bool], to: &[bool]| -> f64 {
        let nearest = nearest_features(to, extents, spacing);
        let mut worst = 0.0f64;
        for i in 0..extents[0] {
            for j in 0..extents[1] {
                for k in 0..extents[2] {
                    let v = (i * extents[1] + j) * extents[2] + k;
                    if from[v] {
                        worst = worst.max(canonical_dist([i, j, k], nearest[v], spacing));
                    }
                }
            }
        }
        worst
    };
    Ok(directed(&a, &b).max(directed(&b, &a)))
}

/// Volume of one class in cm³: voxel count times the voxel volume in mm³,
/// divided by 1000.
pub fn volume_cm3(v: &Volume, class: usize) -> f64 {
    let c = class as f64;
    let count = v.data.iter().filter(|&&x| x == c).count();
    count as f64 * v.spacing.iter().product::<f64>() / 1000.0
}

/// Cohort volume-agreement statistics between predicted and true series.
#[derive(Debug, Clone, PartialEq)]
pub struct Volumetrics {
    pub r_squared: f64,
    pub pearson_r: f64,
    pub abs_dev: f64,
    pub pct_diff: f64,
}

/// pearson_r is the sample correlation; r_squared treats the prediction as
/// an estimator of the truth (1 - SS_res / SS_tot); abs_dev is the mean
/// absolute volume difference; pct_diff divides each absolute difference by
/// the mean of the two volumes (0 when both are 0) and averages, in percent.
pub fn volumetrics(pred: &[f64], truth: &[f64]) -> Result<Volumetrics> {
    if pred.len() != truth.len() {
        return Err(Error::metric(format!(
            "series length mismatch: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len();
    if n < 2 {
        return Err(Error::metric(format!("correlation needs at least 2 subjects, got {n}")));
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / n as f64;
    let (mp, mt) = (mean(pred), mean(truth));
    let mut cov = 0.0;
    let mut var_p = 0.0;
    let mut var_t = 0.0;
    let mut ss_res = 0.0;
    let mut abs_dev = 0.0;
    let mut pct = 0.0;
    for (&p, &t) in pred.iter().zip(truth) {
        cov += (p - mp) * (t - mt);
        var_p += (p - mp) * (p - mp);
        var_t += (t - mt) * (t - mt);
        ss_res += (t - p) * (t - p);
        abs_dev += (p - t).abs();
        let denom = (p + t) / 2.0;
        if denom != 0.0 {
            pct += 100.0 * (p - t).abs() / denom;
        }
    }
    if var_p == 0.0 || var_t == 0.0 {
        return Err(Error::metric(
            "zero variance in a volume series, correlation undefined",
        ));
    }
    Ok(Volumetrics {
        r_squared: 1.0 - ss_res / var_t,
        pearson_r: cov / (var_p.sqrt() * var_t.sqrt()),
        abs_dev: abs_dev / n as f64,
        pct_diff: pct / n as f64,
    })
}

/// Bland-Altman agreement between two measurement series.
#[derive(Debug, Clone, PartialEq)]
pub struct BlandAltman {
    pub mean_diff: f64,
    pub sd_diff: f64,
    /// mean_diff ∓ 1.96 sd_diff.
    pub limits: (f64, f64),
}

pub fn bland_altman(a: &[f64], b: &[f64]) -> Result<BlandAltman> {
    if a.len() != b.len() {
        return Err(Error::metric(format!(
            "series length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::metric(format!("agreement needs at least 2 subjects, got {n}")));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    Ok(BlandAltman {
        mean_diff: mean,
        sd_diff: sd,
        limits: (mean - 1.96 * sd, mean + 1.96 * sd),
    })
}

/// Everything the evaluation protocol reports for one cohort of
/// (prediction, truth) pairs. Classes absent from every prediction and
/// every truth volume are excluded throughout.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    /// Classes present somewhere in the cohort, ascending.
    pub classes: Vec<usize>,
    /// Per-class DSC / HD, averaged over subjects, aligned with `classes`.
    pub dsc: Vec<f64>,
    pub hd: Vec<f64>,
    pub mean_dsc: f64,
    pub mean_hd: f64,
    /// Per-class cohort volumetrics; None when undefined (fewer than 2
    /// subjects or zero variance).
    pub volumetrics: Vec<Option<Volumetrics>>,
    /// Per-class Bland-Altman over (predicted, true) volumes in cm³.
    pub bland_altman: Vec<Option<BlandAltman>>,
}

impl MetricsReport {
    /// Evaluates `classes` label values 1..classes (background 0 excluded)
    /// over the cohort.
    pub fn compute(pairs: &[(Volume, Volume)], classes: usize) -> Result<MetricsReport> {
        if pairs.is_empty() {
            return Err(Error::metric("empty evaluation cohort"));
        }
        let mut present = Vec::new();
        for class in 1..classes {
            let c = class as f64;
            let anywhere = pairs
                .iter()
                .any(|(p, t)| p.data.iter().any(|&x| x == c) || t.data.iter().any(|&x| x == c));
            if anywhere {
                present.push(class);
            }
        }

        let mut dsc_means = Vec::with_capacity(present.len());
        let mut hd_means = Vec::with_capacity(present.len());
        let mut vols = Vec::with_capacity(present.len());
        let mut agreements = Vec::with_capacity(present.len());
        for &class in &present {
            let mut d = 0.0;
            let mut h = 0.0;
            let mut pred_vols = Vec::with_capacity(pairs.len());
            let mut true_vols = Vec::with_capacity(pairs.len());
            for (p, t) in pairs {
                d += dsc(p, t, class)?;
                h += hausdorff(p, t, class)?;
                pred_vols.push(volume_cm3(p, class));
                true_vols.push(volume_cm3(t, class));
            }
            dsc_means.push(d / pairs.len() as f64);
            hd_means.push(h / pairs.len() as f64);
            vols.push(volumetrics(&pred_vols, &true_vols).ok());
            agreements.push(bland_altman(&pred_vols, &true_vols).ok());
        }

        let k = present.len().max(1) as f64;
        Ok(MetricsReport {
            mean_dsc: dsc_means.iter().sum::<f64>() / k,
            mean_hd: hd_means.iter().sum::<f64>() / k,
            classes: present,
            dsc: dsc_means,
            hd: hd_means,
            volumetrics: vols,
            bland_altman: agreements,
        })
    }
}
