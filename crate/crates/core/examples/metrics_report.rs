//! Computes the nine evaluation metrics for a hand-made prediction and
//! prints them in the report column order.

use atinet::metrics::{MetricAccumulator, CSV_HEADER};

fn main() -> atinet::Result<()> {
    // Two images of 2×2 pixels, 3 classes.
    let gt = [0, 1, 2, 2, 1, 1, 0, -1];
    let pred = [0, 1, 1, 2, 1, 0, 0, 2];
    let seg_mask: Vec<bool> = gt.iter().map(|&l| l >= 0).collect();

    let depth_gt = [1.0f32, 2.0, 3.0, 0.0, 4.0, 5.0, 6.0, 7.0];
    let depth_pred = [1.1f32, 1.8, 3.3, 9.0, 4.0, 5.5, 5.0, 7.0];
    let depth_mask: Vec<bool> = depth_gt.iter().map(|&d| d > 0.0).collect();

    // Unit normals in (B, 3, H·W) layout: ground truth points along +z,
    // predictions tilt progressively toward +x.
    let (b, hw) = (2, 4);
    let mut ngt = vec![0f32; b * 3 * hw];
    let mut npred = vec![0f32; b * 3 * hw];
    for n in 0..b {
        for p in 0..hw {
            let tilt = ((n * hw + p) as f32 * 6.0).to_radians();
            ngt[(n * 3 + 2) * hw + p] = 1.0;
            npred[(n * 3) * hw + p] = tilt.sin();
            npred[(n * 3 + 2) * hw + p] = tilt.cos();
        }
    }

    let mut acc = MetricAccumulator::new(3);
    acc.seg.add(&pred, &gt, &seg_mask)?;
    acc.depth.add(&depth_pred, &depth_gt, &depth_mask)?;
    acc.normals.add(&npred, &ngt, (b, hw), &[true; 8])?;
    let report = acc.report();
    println!("{CSV_HEADER}\n{}", report.csv_row());
    Ok(())
}
