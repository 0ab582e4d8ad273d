//! Independent reference implementations shared by the integration tests
//! and the acceptance suite.

#![allow(dead_code)]

use atinet::metrics::seg_metrics;
use atinet::objectives::{depth_loss, normals_loss, seg_loss};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------- losses

/// Largest elementwise relative error between an analytic gradient and
/// central differences of `f`.
pub fn max_rel_grad_err(x: &[f64], analytic: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut worst = 0.0f64;
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic[i].abs().max(numeric.abs());
        if scale > 0.0 {
            worst = worst.max((analytic[i] - numeric).abs() / scale);
        }
    }
    worst
}

/// Random masked problem of at most 64 pixels.
pub struct LossCase {
    pub b: usize,
    pub hw: usize,
    pub mask: Vec<bool>,
    pub rng: ChaCha8Rng,
}

impl LossCase {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = rng.gen_range(1..=2);
        let hw = rng.gen_range(4..=64 / b);
        let mut mask: Vec<bool> = (0..b * hw).map(|_| rng.gen_bool(0.8)).collect();
        mask[0] = true;
        Self { b, hw, mask, rng }
    }

    pub fn normal(&mut self) -> f64 {
        // Box-Muller keeps the draw independent of distribution crates.
        let u1: f64 = self.rng.gen_range(1e-12..1.0);
        let u2: f64 = self.rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

pub const FD_STEP: f64 = 1e-5;

pub fn seg_grad_err(seed: u64) -> f64 {
    let mut case = LossCase::new(seed);
    let c = case.rng.gen_range(2..=5);
    let (b, hw) = (case.b, case.hw);
    let scores: Vec<f64> = (0..b * c * hw).map(|_| 2.0 * case.normal()).collect();
    let labels: Vec<i32> = (0..b * hw)
        .map(|_| case.rng.gen_range(0..c as i32))
        .collect();
    let mask = case.mask.clone();
    let loss = seg_loss(&scores, (b, c, hw), &labels, &mask).unwrap();
    max_rel_grad_err(&scores, &loss.grad, FD_STEP, |s| {
        seg_loss(s, (b, c, hw), &labels, &mask).unwrap().value
    })
}

pub fn depth_grad_err(seed: u64) -> f64 {
    let mut case = LossCase::new(seed);
    let n = case.b * case.hw;
    let target: Vec<f64> = (0..n).map(|_| case.rng.gen_range(0.5..10.0)).collect();
    // Keep every residual well away from the kink of |x|.
    let pred: Vec<f64> = target
        .iter()
        .map(|t| {
            let d: f64 = case.rng.gen_range(0.01..2.0);
            if case.rng.gen_bool(0.5) {
                t + d
            } else {
                t - d
            }
        })
        .collect();
    let mask = case.mask.clone();
    let loss = depth_loss(&pred, &target, &mask).unwrap();
    max_rel_grad_err(&pred, &loss.grad, FD_STEP, |p| {
        depth_loss(p, &target, &mask).unwrap().value
    })
}

pub fn normals_grad_err(seed: u64) -> f64 {
    let mut case = LossCase::new(seed);
    let (b, hw) = (case.b, case.hw);
    let pred: Vec<f64> = (0..b * 3 * hw).map(|_| case.normal()).collect();
    let mut target: Vec<f64> = (0..b * 3 * hw).map(|_| case.normal()).collect();
    for n in 0..b {
        for p in 0..hw {
            let idx = |c: usize| (n * 3 + c) * hw + p;
            let norm = (0..3).map(|c| target[idx(c)].powi(2)).sum::<f64>().sqrt();
            (0..3).for_each(|c| target[idx(c)] /= norm);
        }
    }
    let mask = case.mask.clone();
    let loss = normals_loss(&pred, &target, (b, hw), &mask).unwrap();
    max_rel_grad_err(&pred, &loss.grad, FD_STEP, |p| {
        normals_loss(p, &target, (b, hw), &mask).unwrap().value
    })
}

// ---------------------------------------------------------------- metrics

/// mIoU and pixel accuracy by counting TP, FP and FN of each class
/// directly from the pixels.
pub fn seg_oracle(pred: &[i32], gt: &[i32], mask: &[bool], num_classes: usize) -> (f64, f64) {
    let mut tp = [0usize; 16];
    let mut fp = [0usize; 16];
    let mut fn_ = [0usize; 16];
    assert!(num_classes <= 16);
    let mut valid = 0usize;
    for i in 0..gt.len() {
        if !mask[i] {
            continue;
        }
        valid += 1;
        let (g, p) = (gt[i] as usize, pred[i] as usize);
        if g == p {
            tp[g] += 1;
        } else {
            fn_[g] += 1;
            fp[p] += 1;
        }
    }
    let mut iou_sum = 0.0;
    let mut present = 0;
    for c in 0..num_classes {
        let union = tp[c] + fp[c] + fn_[c];
        if union > 0 {
            iou_sum += tp[c] as f64 / union as f64;
            present += 1;
        }
    }
    let correct: usize = tp.iter().sum();
    let miou = if present == 0 {
        f64::NAN
    } else {
        iou_sum / present as f64
    };
    let acc = if valid == 0 {
        f64::NAN
    } else {
        correct as f64 / valid as f64
    };
    (miou, acc)
}

fn same(a: f64, b: f64, tol: f64) -> bool {
    (a.is_nan() && b.is_nan()) || (a - b).abs() <= tol
}

fn decode(mut code: usize, base: usize, out: &mut [i32]) {
    for v in out.iter_mut() {
        *v = (code % base) as i32;
        code /= base;
    }
}

/// Compares [`seg_metrics`] with [`seg_oracle`] on every pair of 3×3 grids
/// over `classes` labels under every mask in `masks`. Returns the number of
/// cases checked and a mismatch, if any.
pub fn exhaustive_seg(classes: usize, masks: &[[bool; 9]]) -> (u64, Option<String>) {
    use rayon::prelude::*;
    let grids = classes.pow(9);
    let mismatch = masks
        .par_iter()
        .flat_map_iter(|m| (0..grids).map(move |g| (m, g)))
        .find_map_any(|(mask, g)| {
            let (mut gt, mut pred) = ([0i32; 9], [0i32; 9]);
            decode(g, classes, &mut gt);
            (0..grids).find_map(|p| {
                decode(p, classes, &mut pred);
                let got = seg_metrics(&pred, &gt, mask, classes).unwrap();
                let want = seg_oracle(&pred, &gt, mask, classes);
                (!same(got.0, want.0, 1e-12) || !same(got.1, want.1, 1e-12))
                    .then(|| format!("gt {gt:?} pred {pred:?} mask {mask:?}: {got:?} vs {want:?}"))
            })
        });
    ((masks.len() * grids * grids) as u64, mismatch)
}

pub fn all_masks() -> Vec<[bool; 9]> {
    (0..512u32)
        .map(|m| std::array::from_fn(|i| m >> i & 1 == 1))
        .collect()
}

/// `(abs_err, rel_err)` by a plain loop.
pub fn depth_oracle(pred: &[f32], gt: &[f32], mask: &[bool]) -> (f64, f64) {
    let (mut abs, mut rel, mut n) = (0.0, 0.0, 0usize);
    for i in 0..gt.len() {
        if mask[i] {
            let d = (pred[i] as f64 - gt[i] as f64).abs();
            abs += d;
            rel += d / gt[i] as f64;
            n += 1;
        }
    }
    (abs / n as f64, rel / n as f64)
}

/// Per-pixel angles in degrees, via `atan2(|a×b|, a·b)` rather than `acos`.
pub fn angle_oracle(pred: &[f32], gt: &[f32], dims: (usize, usize), mask: &[bool]) -> Vec<f64> {
    let (b, hw) = dims;
    let mut out = Vec::new();
    for n in 0..b {
        for p in 0..hw {
            if !mask[n * hw + p] {
                continue;
            }
            let v = |t: &[f32], c: usize| t[(n * 3 + c) * hw + p] as f64;
            let (a, g) = (
                [v(pred, 0), v(pred, 1), v(pred, 2)],
                [v(gt, 0), v(gt, 1), v(gt, 2)],
            );
            let cross = [
                a[1] * g[2] - a[2] * g[1],
                a[2] * g[0] - a[0] * g[2],
                a[0] * g[1] - a[1] * g[0],
            ];
            let sin = cross.iter().map(|x| x * x).sum::<f64>().sqrt();
            let cos: f64 = (0..3).map(|c| a[c] * g[c]).sum();
            out.push(sin.atan2(cos).to_degrees());
        }
    }
    out
}

/// Mean, median (by full sort) and within-t fractions of `angles`.
pub fn angle_summary(angles: &[f64], thresholds: &[f64; 3]) -> (f64, f64, [f64; 3]) {
    let n = angles.len();
    let mean = angles.iter().sum::<f64>() / n as f64;
    let mut sorted = angles.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let within = thresholds.map(|t| angles.iter().filter(|&&a| a <= t).count() as f64 / n as f64);
    (mean, median, within)
}

/// Random unit vectors in `(B, 3, H·W)` layout; `rough` of them are close to
/// the matching vector in `near`, if given.
pub fn random_normals(rng: &mut ChaCha8Rng, b: usize, hw: usize, near: Option<&[f32]>) -> Vec<f32> {
    let mut out = vec![0f32; b * 3 * hw];
    for n in 0..b {
        for p in 0..hw {
            let idx = |c: usize| (n * 3 + c) * hw + p;
            let mut v = [0f64; 3];
            for (c, vc) in v.iter_mut().enumerate() {
                let base = near.map_or(0.0, |t| t[idx(c)] as f64 * 2.0);
                *vc = base + rng.gen_range(-1.0..1.0);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-6);
            (0..3).for_each(|c| out[idx(c)] = (v[c] / norm) as f32);
        }
    }
    out
}

// ---------------------------------------------------------------- DWA

/// `exp(x)` by argument halving and a Taylor series; independent of
/// `f64::exp`.
pub fn series_exp(x: f64) -> f64 {
    let mut halvings = 0;
    let mut y = x;
    while y.abs() > 0.25 {
        y /= 2.0;
        halvings += 1;
    }
    let (mut term, mut sum) = (1.0f64, 1.0f64);
    for k in 1..40 {
        term *= y / k as f64;
        sum += term;
    }
    for _ in 0..halvings {
        sum *= sum;
    }
    sum
}

/// DWA weights `K·e^{w_i/T} / Σ e^{w_k/T}` evaluated with [`series_exp`].
pub fn dwa_oracle(w: &[f64], temperature: f64) -> Vec<f64> {
    let e: Vec<f64> = w.iter().map(|x| series_exp(x / temperature)).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| w.len() as f64 * x / z).collect()
}
