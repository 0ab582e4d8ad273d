//! Dense-prediction metrics with count-based accumulators.
//!
//! Accumulators can be fed batch by batch and merged across shards; the
//! result equals computing the metrics on all pixels at once.

use serde::{Deserialize, Serialize};

use crate::datamodel::{PerTask, TaskId};
use crate::error::{invalid, Result};

/// Angle thresholds, in degrees, of the within-t fractions.
pub const ANGLE_THRESHOLDS: [f64; 3] = [11.25, 22.5, 30.0];

/// Column order of [`MetricReport::csv_row`].
pub const CSV_HEADER: &str = "mIoU,PixAcc,AbsErr,RelErr,Mean,Median,11.25,22.5,30";

/// Index of the largest score per pixel; ties go to the lower class.
pub fn argmax_labels(scores: &[f32], dims: (usize, usize, usize)) -> Vec<i32> {
    let (b, c, hw) = dims;
    let mut out = vec![0i32; b * hw];
    for n in 0..b {
        for p in 0..hw {
            let mut best = 0;
            let mut best_v = scores[n * c * hw + p];
            for k in 1..c {
                let v = scores[(n * c + k) * hw + p];
                if v > best_v {
                    best = k;
                    best_v = v;
                }
            }
            out[n * hw + p] = best as i32;
        }
    }
    out
}

/// Confusion matrix over valid pixels, indexed `[gt][pred]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegAccumulator {
    pub num_classes: usize,
    pub confusion: Vec<u64>,
}

impl SegAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            confusion: vec![0; num_classes * num_classes],
        }
    }

    pub fn add(&mut self, pred: &[i32], gt: &[i32], mask: &[bool]) -> Result<()> {
        if pred.len() != gt.len() || mask.len() != gt.len() {
            return Err(invalid!(
                "seg metric inputs differ in length: {} {} {}",
                pred.len(),
                gt.len(),
                mask.len()
            ));
        }
        let nc = self.num_classes as i32;
        for i in 0..gt.len() {
            if !mask[i] {
                continue;
            }
            let (g, p) = (gt[i], pred[i]);
            if !(0..nc).contains(&g) || !(0..nc).contains(&p) {
                return Err(invalid!("class pair ({g}, {p}) outside 0..{nc}"));
            }
            self.confusion[g as usize * self.num_classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(invalid!(
                "cannot merge {} and {} classes",
                self.num_classes,
                other.num_classes
            ));
        }
        self.confusion
            .iter_mut()
            .zip(&other.confusion)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn valid(&self) -> u64 {
        self.confusion.iter().sum()
    }

    /// Mean IoU over classes present in ground truth or prediction.
    pub fn miou(&self) -> f64 {
        let n = self.num_classes;
        let mut sum = 0.0;
        let mut present = 0usize;
        for c in 0..n {
            let tp = self.confusion[c * n + c];
            let row: u64 = (0..n).map(|p| self.confusion[c * n + p]).sum();
            let col: u64 = (0..n).map(|g| self.confusion[g * n + c]).sum();
            let union = row + col - tp;
            if union > 0 {
                sum += tp as f64 / union as f64;
                present += 1;
            }
        }
        if present == 0 {
            f64::NAN
        } else {
            sum / present as f64
        }
    }

    pub fn pix_acc(&self) -> f64 {
        let n = self.num_classes;
        let correct: u64 = (0..n).map(|c| self.confusion[c * n + c]).sum();
        ratio(correct as f64, self.valid())
    }
}

fn ratio(num: f64, count: u64) -> f64 {
    if count == 0 {
        f64::NAN
    } else {
        num / count as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthAccumulator {
    pub abs_sum: f64,
    pub rel_sum: f64,
    pub count: u64,
}

impl DepthAccumulator {
    pub fn add(&mut self, pred: &[f32], gt: &[f32], mask: &[bool]) -> Result<()> {
        if pred.len() != gt.len() || mask.len() != gt.len() {
            return Err(invalid!("depth metric inputs differ in length"));
        }
        for i in 0..gt.len() {
            if mask[i] {
                let g = gt[i] as f64;
                if g <= 0.0 {
                    return Err(invalid!(
                        "non-positive ground-truth depth {g} at a valid pixel"
                    ));
                }
                let e = (pred[i] as f64 - g).abs();
                self.abs_sum += e;
                self.rel_sum += e / g;
                self.count += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        self.abs_sum += other.abs_sum;
        self.rel_sum += other.rel_sum;
        self.count += other.count;
    }

    pub fn abs_err(&self) -> f64 {
        ratio(self.abs_sum, self.count)
    }

    pub fn rel_err(&self) -> f64 {
        ratio(self.rel_sum, self.count)
    }
}

/// Keeps every per-pixel angle so the median is exact.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NormalAccumulator {
    pub angles: Vec<f64>,
}

impl NormalAccumulator {
    /// `pred` and `gt` are `(B, 3, H, W)` with `dims = (B, H·W)`.
    pub fn add(
        &mut self,
        pred: &[f32],
        gt: &[f32],
        dims: (usize, usize),
        mask: &[bool],
    ) -> Result<()> {
        let (b, hw) = dims;
        if pred.len() != b * 3 * hw || gt.len() != pred.len() || mask.len() != b * hw {
            return Err(invalid!(
                "normal metric inputs do not match (B={b}, HW={hw})"
            ));
        }
        for n in 0..b {
            for p in 0..hw {
                if mask[n * hw + p] {
                    // Renormalize in f64: f32 unit vectors are off by ~1e-7,
                    // which acos amplifies near zero angles.
                    let (mut dot, mut pp, mut gg) = (0.0f64, 0.0f64, 0.0f64);
                    for c in 0..3 {
                        let i = (n * 3 + c) * hw + p;
                        let (a, g) = (pred[i] as f64, gt[i] as f64);
                        dot += a * g;
                        pp += a * a;
                        gg += g * g;
                    }
                    let denom = (pp * gg).sqrt();
                    let cos = if denom > 0.0 { dot / denom } else { 0.0 };
                    self.angles.push(cos.clamp(-1.0, 1.0).acos().to_degrees());
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        self.angles.extend_from_slice(&other.angles);
    }

    pub fn count(&self) -> u64 {
        self.angles.len() as u64
    }

    pub fn mean(&self) -> f64 {
        ratio(self.angles.iter().sum(), self.count())
    }

    /// Middle value; mean of the two middle values for even counts.
    pub fn median(&self) -> f64 {
        let n = self.angles.len();
        if n == 0 {
            return f64::NAN;
        }
        let mut v = self.angles.clone();
        let (_, hi, _) = v.select_nth_unstable_by(n / 2, f64::total_cmp);
        let hi = *hi;
        if n % 2 == 1 {
            hi
        } else {
            let lo = v[..n / 2].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            0.5 * (lo + hi)
        }
    }

    pub fn within(&self, threshold_deg: f64) -> f64 {
        ratio(
            self.angles.iter().filter(|&&a| a <= threshold_deg).count() as f64,
            self.count(),
        )
    }
}

/// Accumulates all three tasks' metrics over an evaluation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricAccumulator {
    pub seg: SegAccumulator,
    pub depth: DepthAccumulator,
    pub normals: NormalAccumulator,
}

impl MetricAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            seg: SegAccumulator::new(num_classes),
            depth: DepthAccumulator::default(),
            normals: NormalAccumulator::default(),
        }
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        self.seg.merge(&other.seg)?;
        self.depth.merge(&other.depth);
        self.normals.merge(&other.normals);
        Ok(())
    }

    pub fn report(&self) -> MetricReport {
        MetricReport {
            miou: self.seg.miou(),
            pix_acc: self.seg.pix_acc(),
            abs_err: self.depth.abs_err(),
            rel_err: self.depth.rel_err(),
            angle_mean: self.normals.mean(),
            angle_median: self.normals.median(),
            within_11_25: self.normals.within(ANGLE_THRESHOLDS[0]),
            within_22_5: self.normals.within(ANGLE_THRESHOLDS[1]),
            within_30: self.normals.within(ANGLE_THRESHOLDS[2]),
            valid: PerTask([self.seg.valid(), self.depth.count, self.normals.count()]),
        }
    }
}

/// Evaluation summary. Metrics of a task with no valid pixel are NaN.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub miou: f64,
    pub pix_acc: f64,
    pub abs_err: f64,
    pub rel_err: f64,
    pub angle_mean: f64,
    pub angle_median: f64,
    pub within_11_25: f64,
    pub within_22_5: f64,
    pub within_30: f64,
    pub valid: PerTask<u64>,
}

impl MetricReport {
    pub fn is_empty(&self, task: TaskId) -> bool {
        self.valid[task] == 0
    }

    pub fn csv_row(&self) -> String {
        [
            self.miou,
            self.pix_acc,
            self.abs_err,
            self.rel_err,
            self.angle_mean,
            self.angle_median,
            self.within_11_25,
            self.within_22_5,
            self.within_30,
        ]
        .iter()
        .map(|v| format!("{v:.6}"))
        .collect::<Vec<_>>()
        .join(",")
    }
}

/// `(miou, pix_acc)` over valid pixels.
pub fn seg_metrics(
    pred: &[i32],
    gt: &[i32],
    mask: &[bool],
    num_classes: usize,
) -> Result<(f64, f64)> {
    let mut acc = SegAccumulator::new(num_classes);
    acc.add(pred, gt, mask)?;
    Ok((acc.miou(), acc.pix_acc()))
}

/// `(abs_err, rel_err)` over valid pixels.
pub fn depth_metrics(pred: &[f32], gt: &[f32], mask: &[bool]) -> Result<(f64, f64)> {
    let mut acc = DepthAccumulator::default();
    acc.add(pred, gt, mask)?;
    Ok((acc.abs_err(), acc.rel_err()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalMetrics {
    pub mean: f64,
    pub median: f64,
    /// Fractions within [`ANGLE_THRESHOLDS`].
    pub within: [f64; 3],
}

pub fn normal_metrics(
    pred: &[f32],
    gt: &[f32],
    dims: (usize, usize),
    mask: &[bool],
) -> Result<NormalMetrics> {
    let mut acc = NormalAccumulator::default();
    acc.add(pred, gt, dims, mask)?;
    Ok(NormalMetrics {
        mean: acc.mean(),
        median: acc.median(),
        within: ANGLE_THRESHOLDS.map(|t| acc.within(t)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seg_fixed_cases() {
        assert_eq!(
            seg_metrics(&[0, 1, 2], &[0, 1, 2], &[true; 3], 3).unwrap(),
            (1.0, 1.0)
        );
        let (miou, acc) = seg_metrics(&[0, 1, 1, 1], &[0, 0, 1, 1], &[true; 4], 2).unwrap();
        assert!((miou - 7.0 / 12.0).abs() < 1e-12);
        assert_eq!(acc, 0.75);
        assert_eq!(seg_metrics(&[1, 0], &[0, 1], &[true; 2], 2).unwrap().0, 0.0);
        assert!(seg_metrics(&[0], &[0], &[false], 2).unwrap().0.is_nan());
    }

    #[test]
    fn depth_fixed_cases() {
        assert_eq!(
            depth_metrics(&[1.0, 2.0], &[1.0, 2.0], &[true; 2]).unwrap(),
            (0.0, 0.0)
        );
        assert_eq!(
            depth_metrics(&[1.0, 7.0], &[2.0, 0.0], &[true, false]).unwrap(),
            (1.0, 0.5)
        );
    }

    #[test]
    fn normal_fixed_cases() {
        let x = [1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        let m = normal_metrics(&x, &x, (1, 2), &[true; 2]).unwrap();
        assert_eq!((m.mean, m.median, m.within), (0.0, 0.0, [1.0; 3]));
        let y = [0.0, 0.0, 1.0, 1.0, 0.0, 0.0];
        let m = normal_metrics(&y, &x, (1, 2), &[true; 2]).unwrap();
        assert_eq!((m.mean, m.median, m.within), (90.0, 90.0, [0.0; 3]));
        let half = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let m = normal_metrics(&half, &x, (1, 2), &[true; 2]).unwrap();
        assert_eq!((m.mean, m.median, m.within[2]), (45.0, 45.0, 0.5));
    }

    #[test]
    fn slightly_long_dot_does_not_nan() {
        let p = [1.000_001f32, 0.0, 0.0];
        let m = normal_metrics(&p, &p, (1, 1), &[true]).unwrap();
        assert_eq!(m.mean, 0.0);
    }

    #[test]
    fn angle_ignores_vector_length() {
        let gt = [1.0f32, 0.0, 0.0];
        let pred = [3.0f32, 3.0, 0.0];
        let m = normal_metrics(&pred, &gt, (1, 1), &[true]).unwrap();
        assert!((m.mean - 45.0).abs() < 1e-12);
    }

    #[test]
    fn csv_row_has_nine_columns() {
        let mut acc = MetricAccumulator::new(2);
        acc.seg.add(&[0, 1], &[0, 1], &[true; 2]).unwrap();
        let row = acc.report().csv_row();
        assert_eq!(row.split(',').count(), CSV_HEADER.split(',').count());
        assert!(row.starts_with("1.000000,1.000000,NaN"));
    }

    #[test]
    fn argmax_picks_lowest_on_ties() {
        // B=1, C=3, HW=2
        let s = [0.5, 0.1, 0.5, 0.9, 0.2, 0.9];
        assert_eq!(argmax_labels(&s, (1, 3, 2)), vec![0, 1]);
    }
}
