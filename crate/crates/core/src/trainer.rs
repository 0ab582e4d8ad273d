//! Two-phase training: Adam, step learning-rate decay, DWA task weighting
//! and, for atinet, distillation switched on partway through with a fresh
//! draw of the attention parameters.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint};
use crate::datamodel::{epoch_shuffle_seed, make_batches, Batch, PerTask, Sample, TaskId};
use crate::error::{invalid, Error, Result};
use crate::metrics::{argmax_labels, MetricAccumulator, MetricReport, CSV_HEADER};
use crate::models::{Model, ModelKind, Predictions};
use crate::nn::{Adam, Ctx, ParamGroup, Var};
use crate::objectives::{
    depth_loss, normals_loss, seg_loss, total_loss, DwaState, MaskedLoss, Weighting,
};
use crate::tensor::Tensor;

pub const RUNLOG_CSV: &str = "runlog.csv";
pub const RUNLOG_JSON: &str = "runlog.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    /// First epoch (1-based) trained at the decayed rate.
    pub lr_decay_epoch: usize,
    /// First epoch (1-based) with distillation active.
    pub distill_activation_epoch: usize,
    pub weighting: Weighting,
    pub seed: u64,
    /// Write `epoch_<k>.ckpt` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::with_epochs(200)
    }
}

impl TrainConfig {
    /// Batch 2, lr 1e-4 and both switch points at half of `total_epochs`.
    pub fn with_epochs(total_epochs: usize) -> Self {
        let half = (total_epochs / 2).max(1);
        Self {
            total_epochs,
            batch_size: 2,
            lr: 1e-4,
            lr_decay_factor: 0.5,
            lr_decay_epoch: half,
            distill_activation_epoch: half,
            weighting: Weighting::default(),
            seed: 0,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(invalid!("total_epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid!("batch_size must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return Err(invalid!(
                "lr_decay_factor must be positive, got {}",
                self.lr_decay_factor
            ));
        }
        if self.distill_activation_epoch == 0 || self.distill_activation_epoch > self.total_epochs {
            return Err(invalid!(
                "distill_activation_epoch {} outside 1..={}",
                self.distill_activation_epoch,
                self.total_epochs
            ));
        }
        if let Weighting::Dwa { temperature } = self.weighting {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(invalid!(
                    "DWA temperature must be positive, got {temperature}"
                ));
            }
        }
        Ok(())
    }

    /// Learning rate used throughout `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if self.lr_decay_epoch > 0 && epoch >= self.lr_decay_epoch {
            self.lr * self.lr_decay_factor
        } else {
            self.lr
        }
    }

    /// Seed for the attention re-draw at the activation epoch.
    pub fn reset_seed(&self) -> u64 {
        self.seed ^ 0xA77E_4710_4E5E_7000
    }
}

/// One completed epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub distillation_active: bool,
    /// Weights used during this epoch; zero for tasks the model lacks.
    pub lambda: PerTask<f64>,
    /// Mean of each task loss over the batches where the task had valid
    /// pixels.
    pub train_loss: PerTask<f64>,
    /// Mean over batches of the weighted total.
    pub total_loss: f64,
    /// Largest per-step gradient L2 norm of each parameter group.
    pub grad_norm_max: BTreeMap<ParamGroup, f64>,
    pub val: Option<MetricReport>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
}

fn csv_num(v: f64) -> String {
    format!("{v:.9e}")
}

impl RunLog {
    pub fn csv_header() -> String {
        let mut cols = vec![
            "epoch".to_string(),
            "lr".into(),
            "distillation_active".into(),
        ];
        cols.extend(TaskId::ALL.iter().map(|t| format!("lambda_{}", t.short())));
        cols.extend(TaskId::ALL.iter().map(|t| format!("loss_{}", t.short())));
        cols.push("loss_total".into());
        cols.extend(ParamGroup::ALL.iter().map(|g| format!("grad_norm_max_{g}")));
        cols.extend(CSV_HEADER.split(',').map(|c| format!("val_{c}")));
        cols.join(",")
    }

    /// CSV with one row per epoch. Wall time is left out so identical runs
    /// produce identical files; it is kept in the JSON form.
    pub fn to_csv(&self) -> String {
        let mut out = Self::csv_header();
        out.push('\n');
        for r in &self.records {
            let mut row = vec![
                r.epoch.to_string(),
                csv_num(r.lr),
                (r.distillation_active as u8).to_string(),
            ];
            row.extend(r.lambda.0.iter().map(|&v| csv_num(v)));
            row.extend(r.train_loss.0.iter().map(|&v| csv_num(v)));
            row.push(csv_num(r.total_loss));
            row.extend(
                ParamGroup::ALL
                    .iter()
                    .map(|g| csv_num(r.grad_norm_max.get(g).copied().unwrap_or(0.0))),
            );
            match &r.val {
                Some(v) => row.push(v.csv_row()),
                None => row.push(",".repeat(CSV_HEADER.split(',').count() - 1)),
            }
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let csv = dir.join(RUNLOG_CSV);
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join(RUNLOG_JSON);
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))
    }
}

/// Losses of one batch for the tasks a model predicts.
fn batch_losses(
    model: &Model,
    preds: &Predictions,
    batch: &Batch,
) -> Result<PerTask<Option<MaskedLoss>>> {
    let masks = batch.masks();
    let (b, hw) = (batch.size(), batch.height() * batch.width());
    let to64 = |t: &Tensor| t.data().iter().map(|&v| v as f64).collect::<Vec<f64>>();
    let mut out: PerTask<Option<MaskedLoss>> = PerTask(Default::default());
    for t in model.tasks() {
        let pred = preds
            .get(t)
            .ok_or_else(|| invalid!("model produced no {t} output"))?
            .value();
        out[t] = Some(match t {
            TaskId::Segmentation => seg_loss(
                &to64(pred),
                (b, model.config.num_classes, hw),
                &batch.labels,
                &masks.seg,
            )?,
            TaskId::Depth => depth_loss(&to64(pred), &to64(&batch.depth), &masks.depth)?,
            TaskId::Normals => {
                normals_loss(&to64(pred), &to64(&batch.normals), (b, hw), &masks.normals)?
            }
        });
    }
    Ok(out)
}

struct StepOutcome {
    losses: PerTask<f64>,
    /// Tasks with at least one valid pixel in the batch.
    present: PerTask<bool>,
    total: f64,
    grad_norms: BTreeMap<ParamGroup, f64>,
}

/// What [`Trainer::start_epoch`] did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStart {
    pub epoch: usize,
    pub lr: f64,
    pub distillation_active: bool,
    /// True when the attention parameters were re-drawn.
    pub attention_reset: bool,
}

/// Owns a model and everything needed to continue its training.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub adam: Adam,
    pub dwa: Option<DwaState>,
    pub log: RunLog,
    /// Number of completed epochs.
    pub epochs_done: usize,
    /// Directory for run logs, checkpoints and diagnostics.
    pub out_dir: Option<PathBuf>,
    started: Option<EpochStart>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let dwa = match config.weighting {
            Weighting::Dwa { temperature } => {
                Some(DwaState::new(model.tasks().len(), temperature)?)
            }
            Weighting::Equal => None,
        };
        let adam = Adam::new(model.store.len());
        Ok(Self {
            model,
            config,
            adam,
            dwa,
            log: RunLog::default(),
            epochs_done: 0,
            out_dir: None,
            started: None,
        })
    }

    pub fn with_out_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    /// Restores a trainer saved by [`Trainer::save_checkpoint`].
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let Checkpoint {
            model,
            train_config,
            adam,
            dwa,
            log,
            epoch,
        } = ck;
        let mut t = Self::new(model, train_config)?;
        t.adam = adam;
        t.dwa = dwa;
        t.log = log;
        t.epochs_done = epoch;
        Ok(t)
    }

    pub fn is_atinet(&self) -> bool {
        self.model.kind() == ModelKind::AtiNet
    }

    pub fn distillation_active_at(&self, epoch: usize) -> bool {
        self.is_atinet() && epoch >= self.config.distill_activation_epoch
    }

    /// Current per-task weights for the model's tasks, in task order.
    pub fn lambda(&self) -> PerTask<f64> {
        let mut out = PerTask([0.0; 3]);
        let tasks = self.model.tasks();
        for (i, &t) in tasks.iter().enumerate() {
            out[t] = self.dwa.as_ref().map_or(1.0, |d| d.lambda[i]);
        }
        out
    }

    pub fn is_finished(&self) -> bool {
        self.epochs_done >= self.config.total_epochs
    }

    /// Begins the next epoch: at the activation epoch of an atinet run the
    /// attention parameters are re-drawn and their Adam state dropped.
    pub fn start_epoch(&mut self) -> Result<EpochStart> {
        if let Some(s) = self.started {
            return Ok(s);
        }
        if self.is_finished() {
            return Err(invalid!(
                "all {} epochs are already done",
                self.config.total_epochs
            ));
        }
        let epoch = self.epochs_done + 1;
        let attention_reset = self.is_atinet() && epoch == self.config.distill_activation_epoch;
        if attention_reset {
            let ids = self.model.reset_attention(self.config.reset_seed());
            self.adam.clear(&ids);
        }
        let s = EpochStart {
            epoch,
            lr: self.config.lr_at(epoch),
            distillation_active: self.distillation_active_at(epoch),
            attention_reset,
        };
        self.started = Some(s);
        Ok(s)
    }

    fn step(
        &mut self,
        batch: &Batch,
        start: &EpochStart,
        lambda: &PerTask<f64>,
        step: usize,
    ) -> Result<StepOutcome> {
        let ctx = Ctx::train(&self.model.store);
        let images = Var::constant(batch.images.clone());
        let preds = self
            .model
            .forward(&ctx, &images, start.distillation_active)?;
        let losses = batch_losses(&self.model, &preds, batch)?;
        let mut values = PerTask([0.0; 3]);
        let mut present = PerTask([false; 3]);
        let mut seeds = Vec::new();
        let mut scalars = Vec::new();
        for t in self.model.tasks() {
            let l = losses[t].as_ref().expect("loss for every model task");
            values[t] = l.value;
            if !l.value.is_finite() {
                drop(ctx);
                return Err(self.non_finite(
                    start,
                    step,
                    &values,
                    &format!("{t} loss is {}", l.value),
                ));
            }
            if l.is_empty() {
                continue;
            }
            present[t] = true;
            let pred = preds.get(t).expect("prediction for every model task");
            let grad = Tensor::from_vec(pred.shape(), l.grad.iter().map(|&g| g as f32).collect())?;
            scalars.push((ctx.external_scalar(pred, l.value, grad)?, lambda[t] as f32));
        }
        seeds.extend(scalars.iter().map(|(v, w)| (v, *w)));
        let grads = ctx.backward(&seeds)?;
        let bn = ctx.take_bn_updates();
        drop(seeds);
        drop(scalars);
        drop(preds);
        drop(ctx);
        let grad_norms: BTreeMap<ParamGroup, f64> = ParamGroup::ALL
            .iter()
            .map(|&g| (g, grads.group_norm(&self.model.store, g)))
            .collect();
        if let Some((g, n)) = grad_norms.iter().find(|(_, n)| !n.is_finite()) {
            return Err(self.non_finite(
                start,
                step,
                &values,
                &format!("{g} gradient norm is {n}"),
            ));
        }
        bn.apply(&mut self.model.store);
        self.adam
            .step(&mut self.model.store, &grads, start.lr as f32);
        Ok(StepOutcome {
            total: total_loss(&values, lambda),
            losses: values,
            present,
            grad_norms,
        })
    }

    fn non_finite(
        &self,
        start: &EpochStart,
        step: usize,
        losses: &PerTask<f64>,
        what: &str,
    ) -> Error {
        let mut detail = what.to_string();
        if let Some(dir) = &self.out_dir {
            let path = dir.join(format!("nonfinite_epoch{}_step{}.json", start.epoch, step));
            let snapshot = serde_json::json!({
                "epoch": start.epoch,
                "step": step,
                "lr": start.lr,
                "distillation_active": start.distillation_active,
                "losses": losses,
                "lambda": self.lambda(),
                "reason": what,
                "param_checksums": ParamGroup::ALL.iter().map(|&g| (g.name(), self.model.store.checksum(g))).collect::<BTreeMap<_, _>>(),
            });
            match serde_json::to_string_pretty(&snapshot)
                .map_err(Error::from)
                .and_then(|s| fs::write(&path, s).map_err(|e| Error::io(&path, e)))
            {
                Ok(()) => detail.push_str(&format!("; snapshot at {}", path.display())),
                Err(e) => detail.push_str(&format!("; snapshot failed: {e}")),
            }
        }
        Error::NonFinite {
            epoch: start.epoch,
            step,
            detail,
        }
    }

    /// Trains the epoch begun by [`Trainer::start_epoch`] (starting it if
    /// needed), updates DWA and appends the epoch to the log.
    pub fn finish_epoch(
        &mut self,
        train: &[Sample],
        val: Option<&[Sample]>,
    ) -> Result<&EpochRecord> {
        let start = self.start_epoch()?;
        let clock = Instant::now();
        let lambda = self.lambda();
        let batches = make_batches(
            train,
            self.config.batch_size,
            true,
            epoch_shuffle_seed(self.config.seed, start.epoch),
        )?;
        let mut loss_sum = PerTask([0.0f64; 3]);
        let mut loss_batches = PerTask([0usize; 3]);
        let mut total_sum = 0.0;
        let mut grad_norm_max: BTreeMap<ParamGroup, f64> =
            ParamGroup::ALL.iter().map(|&g| (g, 0.0)).collect();
        for (i, batch) in batches.iter().enumerate() {
            let out = self.step(batch, &start, &lambda, i + 1)?;
            for t in TaskId::ALL {
                if out.present[t] {
                    loss_sum[t] += out.losses[t];
                    loss_batches[t] += 1;
                }
            }
            total_sum += out.total;
            for (g, n) in out.grad_norms {
                let m = grad_norm_max.entry(g).or_insert(0.0);
                *m = m.max(n);
            }
        }
        let n = batches.len() as f64;
        // A task's epoch loss averages only the batches where it had valid
        // pixels; with none at all it is 0.
        let train_loss = PerTask::from_fn(|t| match loss_batches[t] {
            0 => 0.0,
            k => loss_sum[t] / k as f64,
        });
        if let Some(dwa) = &mut self.dwa {
            let means: Vec<f64> = self.model.tasks().iter().map(|&t| train_loss[t]).collect();
            dwa.update(&means)?;
        }
        let val = match val {
            Some(v) => Some(evaluate(
                &self.model,
                v,
                self.config.batch_size,
                start.distillation_active,
            )?),
            None => None,
        };
        self.started = None;
        self.epochs_done = start.epoch;
        self.log.records.push(EpochRecord {
            epoch: start.epoch,
            lr: start.lr,
            distillation_active: start.distillation_active,
            lambda,
            train_loss,
            total_loss: total_sum / n,
            grad_norm_max,
            val,
            wall_seconds: clock.elapsed().as_secs_f64(),
        });
        Ok(self.log.records.last().expect("just pushed"))
    }

    pub fn run_epoch(&mut self, train: &[Sample], val: Option<&[Sample]>) -> Result<&EpochRecord> {
        self.start_epoch()?;
        self.finish_epoch(train, val)
    }

    /// Runs the remaining epochs, writing the run log after every epoch and
    /// checkpoints as configured, plus a final checkpoint.
    pub fn train(&mut self, train: &[Sample], val: Option<&[Sample]>) -> Result<&RunLog> {
        self.train_with(train, val, |_| {})
    }

    /// [`Trainer::train`] calling `on_epoch` after each completed epoch.
    pub fn train_with(
        &mut self,
        train: &[Sample],
        val: Option<&[Sample]>,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<&RunLog> {
        if train.is_empty() {
            return Err(invalid!("training set is empty"));
        }
        if let Some(dir) = &self.out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        while !self.is_finished() {
            on_epoch(self.run_epoch(train, val)?);
            if let Some(dir) = self.out_dir.clone() {
                self.log.write(&dir)?;
                let every = self.config.checkpoint_every;
                if every > 0 && self.epochs_done.is_multiple_of(every) {
                    self.save_checkpoint(&dir.join(format!("epoch_{}.ckpt", self.epochs_done)))?;
                }
            }
        }
        if let Some(dir) = self.out_dir.clone() {
            self.save_checkpoint(&dir.join(FINAL_CHECKPOINT))?;
        }
        Ok(&self.log)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        checkpoint::save(
            path,
            &self.model,
            &self.config,
            &self.adam,
            self.dwa.as_ref(),
            &self.log,
            self.epochs_done,
        )
    }
}

/// Inference-mode metrics over `samples`, accumulated batch by batch.
pub fn evaluate(
    model: &Model,
    samples: &[Sample],
    batch_size: usize,
    distillation_active: bool,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(invalid!("evaluation set is empty"));
    }
    let mut acc = MetricAccumulator::new(model.config.num_classes);
    for batch in make_batches(samples, batch_size, false, 0)? {
        let ctx = Ctx::eval(&model.store);
        let preds = model.forward(
            &ctx,
            &Var::constant(batch.images.clone()),
            distillation_active,
        )?;
        let masks = batch.masks();
        let (b, hw) = (batch.size(), batch.height() * batch.width());
        if let Some(seg) = preds.get(TaskId::Segmentation) {
            let labels = argmax_labels(seg.value().data(), (b, model.config.num_classes, hw));
            acc.seg.add(&labels, &batch.labels, &masks.seg)?;
        }
        if let Some(d) = preds.get(TaskId::Depth) {
            acc.depth
                .add(d.value().data(), batch.depth.data(), &masks.depth)?;
        }
        if let Some(n) = preds.get(TaskId::Normals) {
            acc.normals.add(
                n.value().data(),
                batch.normals.data(),
                (b, hw),
                &masks.normals,
            )?;
        }
    }
    Ok(acc.report())
}
