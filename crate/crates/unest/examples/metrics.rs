//! Scores a small cohort of predicted label maps against references:
//! per-class Dice and Hausdorff, volume agreement statistics, and
//! Bland-Altman limits, the same numbers the eval command reports.
//!
//!     cargo run --example metrics

use unest::metrics::{bland_altman, dsc, hausdorff, volume_cm3, volumetrics, MetricsReport};
use unest::volume::{Volume, VolumeKind};
use unest::Result;

fn cube(extents: [usize; 3], lo: [usize; 3], hi: [usize; 3], class: f64) -> Result<Volume> {
    let mut data = vec![0.0; extents.iter().product()];
    for i in lo[0]..hi[0] {
        for j in lo[1]..hi[1] {
            for k in lo[2]..hi[2] {
                data[(i * extents[1] + j) * extents[2] + k] = class;
            }
        }
    }
    Volume::new(extents, [1.0, 1.5, 1.5], VolumeKind::Label, data)
}

fn main() -> Result<()> {
    // A predicted cube one voxel off against its reference.
    let truth = cube([12; 3], [2, 2, 2], [8, 8, 8], 1.0)?;
    let pred = cube([12; 3], [3, 2, 2], [9, 8, 8], 1.0)?;
    println!("shifted 6^3 cube, spacing 1.0 x 1.5 x 1.5 mm:");
    println!("  dsc        {:.4}", dsc(&pred, &truth, 1)?);
    println!("  hausdorff  {:.4} mm", hausdorff(&pred, &truth, 1)?);
    println!("  volumes    {:.4} vs {:.4} cm^3", volume_cm3(&pred, 1), volume_cm3(&truth, 1));

    // A missing structure on one side is an infinite surface distance.
    let empty = cube([12; 3], [0; 3], [0; 3], 1.0)?;
    println!("  vs empty   dsc {:.1}, hausdorff {}", dsc(&empty, &truth, 1)?, hausdorff(&empty, &truth, 1)?);

    // Volume series across a cohort: agreement and bias statistics.
    let pred_cm3 = [1.02, 2.31, 0.87, 3.44, 1.95];
    let true_cm3 = [1.00, 2.40, 0.80, 3.50, 2.00];
    let v = volumetrics(&pred_cm3, &true_cm3)?;
    println!("cohort volumes: r^2 {:.4}, pearson {:.4}, |dev| {:.4} cm^3, pct diff {:.2}%",
        v.r_squared, v.pearson_r, v.abs_dev, v.pct_diff);
    let ba = bland_altman(&pred_cm3, &true_cm3)?;
    println!("bland-altman: bias {:.4} cm^3, limits ({:.4}, {:.4})", ba.mean_diff, ba.limits.0, ba.limits.1);

    // The full report walks every class present in a cohort of pairs.
    let pairs = vec![
        (cube([10; 3], [1, 1, 1], [5, 5, 5], 1.0)?, cube([10; 3], [1, 1, 1], [5, 5, 6], 1.0)?),
        (cube([10; 3], [2, 2, 2], [7, 7, 7], 2.0)?, cube([10; 3], [2, 2, 2], [7, 7, 7], 2.0)?),
    ];
    let report = MetricsReport::compute(&pairs, 4)?;
    println!("cohort report over classes {:?}: mean dsc {:.4}", report.classes, report.mean_dsc);
    Ok(())
}
