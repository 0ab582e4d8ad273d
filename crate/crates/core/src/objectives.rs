//! Masked per-task losses, their weighted sum and Dynamic Weight Averaging.
//!
//! Losses take predictions as `f64` slices in NCHW order and return the value
//! together with its gradient with respect to the predictions. All reductions
//! accumulate in `f64`.

use serde::{Deserialize, Serialize};

use crate::datamodel::{PerTask, TaskId};
use crate::error::{invalid, Result};

/// Value, gradient and valid-pixel count of one masked loss.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedLoss {
    pub value: f64,
    /// Same layout as the predictions.
    pub grad: Vec<f64>,
    pub valid: usize,
}

impl MaskedLoss {
    /// True when no pixel was valid; value and gradient are then zero.
    pub fn is_empty(&self) -> bool {
        self.valid == 0
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(invalid!("{what} has {got} entries, expected {want}"));
    }
    Ok(())
}

/// Mean cross entropy over valid pixels. `scores` is `(B, C, H, W)` with
/// `dims = (B, C, H·W)`; `labels` and `mask` are `B·H·W`.
pub fn seg_loss(
    scores: &[f64],
    dims: (usize, usize, usize),
    labels: &[i32],
    mask: &[bool],
) -> Result<MaskedLoss> {
    let (b, c, hw) = dims;
    check_len("scores", scores.len(), b * c * hw)?;
    check_len("labels", labels.len(), b * hw)?;
    check_len("mask", mask.len(), b * hw)?;
    let mut grad = vec![0.0; scores.len()];
    let mut total = 0.0;
    let mut valid = 0usize;
    let mut probs = vec![0.0; c];
    for n in 0..b {
        for p in 0..hw {
            if !mask[n * hw + p] {
                continue;
            }
            let label = labels[n * hw + p];
            if label < 0 || label as usize >= c {
                return Err(invalid!(
                    "label {label} at pixel {p} of sample {n} outside 0..{c}"
                ));
            }
            let at = |k: usize| (n * c + k) * hw + p;
            let max = (0..c)
                .map(|k| scores[at(k)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (k, pk) in probs.iter_mut().enumerate() {
                *pk = (scores[at(k)] - max).exp();
                z += *pk;
            }
            total += z.ln() + max - scores[at(label as usize)];
            for (k, pk) in probs.iter().enumerate() {
                grad[at(k)] = pk / z;
            }
            grad[at(label as usize)] -= 1.0;
            valid += 1;
        }
    }
    Ok(finish(total, grad, valid))
}

fn finish(total: f64, mut grad: Vec<f64>, valid: usize) -> MaskedLoss {
    if valid == 0 {
        return MaskedLoss {
            value: 0.0,
            grad,
            valid,
        };
    }
    let inv = 1.0 / valid as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    MaskedLoss {
        value: total * inv,
        grad,
        valid,
    }
}

/// Mean absolute error over valid pixels. The gradient at `pred == target`
/// is taken as zero.
pub fn depth_loss(pred: &[f64], target: &[f64], mask: &[bool]) -> Result<MaskedLoss> {
    check_len("depth target", target.len(), pred.len())?;
    check_len("mask", mask.len(), pred.len())?;
    let mut grad = vec![0.0; pred.len()];
    let mut total = 0.0;
    let mut valid = 0usize;
    for i in 0..pred.len() {
        if mask[i] {
            let d = pred[i] - target[i];
            total += d.abs();
            grad[i] = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            valid += 1;
        }
    }
    Ok(finish(total, grad, valid))
}

/// Negative mean dot product between predicted and target unit normals.
/// `pred` and `target` are `(B, 3, H, W)` with `dims = (B, H·W)`; `mask` is
/// `B·H·W`.
pub fn normals_loss(
    pred: &[f64],
    target: &[f64],
    dims: (usize, usize),
    mask: &[bool],
) -> Result<MaskedLoss> {
    let (b, hw) = dims;
    check_len("normals", pred.len(), b * 3 * hw)?;
    check_len("normals target", target.len(), pred.len())?;
    check_len("mask", mask.len(), b * hw)?;
    let mut grad = vec![0.0; pred.len()];
    let mut total = 0.0;
    let mut valid = 0usize;
    for n in 0..b {
        for p in 0..hw {
            if !mask[n * hw + p] {
                continue;
            }
            for c in 0..3 {
                let i = (n * 3 + c) * hw + p;
                total -= pred[i] * target[i];
                grad[i] = -target[i];
            }
            valid += 1;
        }
    }
    Ok(finish(total, grad, valid))
}

/// Per-task loss values and valid-pixel counts of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossVector {
    pub losses: PerTask<f64>,
    pub counts: PerTask<usize>,
}

impl LossVector {
    /// Tasks that had no valid pixel.
    pub fn empty_tasks(&self) -> Vec<TaskId> {
        TaskId::ALL
            .into_iter()
            .filter(|&t| self.counts[t] == 0)
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.losses.0.iter().all(|l| l.is_finite())
    }
}

/// `Σ_i λ_i L_i`.
pub fn total_loss(losses: &PerTask<f64>, lambda: &PerTask<f64>) -> f64 {
    TaskId::ALL.iter().map(|&t| lambda[t] * losses[t]).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Weighting {
    Dwa { temperature: f64 },
    Equal,
}

impl Default for Weighting {
    fn default() -> Self {
        Weighting::Dwa {
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

pub const DEFAULT_TEMPERATURE: f64 = 2.0;

/// `λ_i = K·exp(w_i/T) / Σ_k exp(w_k/T)`.
pub fn dwa_weights(w: &[f64], temperature: f64) -> Vec<f64> {
    let k = w.len() as f64;
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = w.iter().map(|&x| ((x - max) / temperature).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| k * x / z).collect()
}

/// Dynamic Weight Averaging over `K` tasks, updated once per epoch from
/// the epoch's mean task losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DwaState {
    pub temperature: f64,
    /// Mean losses of the last two completed epochs, oldest first.
    pub history: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
    /// Set when the last update hit a zero loss in the denominator.
    pub guard_triggered: bool,
}

impl DwaState {
    pub fn new(num_tasks: usize, temperature: f64) -> Result<Self> {
        if num_tasks == 0 {
            return Err(invalid!("DWA needs at least one task"));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(invalid!(
                "DWA temperature must be positive, got {temperature}"
            ));
        }
        Ok(Self {
            temperature,
            history: Vec::new(),
            lambda: vec![1.0; num_tasks],
            guard_triggered: false,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.lambda.len()
    }

    /// Records the mean losses of the epoch that just finished and sets the
    /// weights for the next one. Returns the new weights.
    pub fn update(&mut self, epoch_mean_losses: &[f64]) -> Result<&[f64]> {
        if epoch_mean_losses.len() != self.num_tasks() {
            return Err(invalid!(
                "DWA got {} losses for {} tasks",
                epoch_mean_losses.len(),
                self.num_tasks()
            ));
        }
        self.history.push(epoch_mean_losses.to_vec());
        if self.history.len() > 2 {
            self.history.remove(0);
        }
        self.guard_triggered = false;
        if self.history.len() < 2 {
            self.lambda = vec![1.0; self.num_tasks()];
            return Ok(&self.lambda);
        }
        let (older, newer) = (&self.history[0], &self.history[1]);
        let w: Vec<f64> = older
            .iter()
            .zip(newer)
            .map(|(&o, &n)| {
                if o == 0.0 || !o.is_finite() {
                    self.guard_triggered = true;
                    1.0
                } else {
                    n / o
                }
            })
            .collect();
        self.lambda = dwa_weights(&w, self.temperature);
        Ok(&self.lambda)
    }
}
