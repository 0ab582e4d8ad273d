//! The five comparable network variants and their parameter audit.
//!
//! All variants name their parameters by role (`encoder.*`, `decoder.*`,
//! `attention.*`, `distill.*`, `heads.*`) and draw initial values from
//! `(seed, name)`, so two variants built from one seed agree on every
//! parameter they have in common.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::Attention;
use crate::backbone::{BackboneConfig, Decoder, Encoder};
use crate::datamodel::{PerTask, TaskId};
use crate::distillation::{padnet_distill, DistillMode, LatentDistillation, MessagePassing};
use crate::error::{invalid, Error, Result};
use crate::nn::{Conv2d, Ctx, ParamGroup, ParamId, ParamStore, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    OneTask(TaskId),
    Split,
    Mtan,
    PadNet,
    AtiNet,
}

impl ModelKind {
    pub fn tasks(self) -> Vec<TaskId> {
        match self {
            ModelKind::OneTask(t) => vec![t],
            _ => TaskId::ALL.to_vec(),
        }
    }

    pub fn has_distillation(self) -> bool {
        matches!(self, ModelKind::PadNet | ModelKind::AtiNet)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::OneTask(t) => write!(f, "one_task:{}", t.name()),
            ModelKind::Split => f.write_str("split"),
            ModelKind::Mtan => f.write_str("mtan"),
            ModelKind::PadNet => f.write_str("padnet"),
            ModelKind::AtiNet => f.write_str("atinet"),
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    /// Accepts `atinet`, `mtan`, `split`, `padnet` and `one_task:<task>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "split" => Ok(ModelKind::Split),
            "mtan" => Ok(ModelKind::Mtan),
            "padnet" => Ok(ModelKind::PadNet),
            "atinet" => Ok(ModelKind::AtiNet),
            _ => match s.strip_prefix("one_task:").or_else(|| s.strip_prefix("one_task_")) {
                Some(t) => Ok(ModelKind::OneTask(t.parse()?)),
                None => Err(invalid!(
                    "unknown model kind {s:?} (expected atinet, mtan, split, padnet or one_task:<task>)"
                )),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub backbone: BackboneConfig,
    pub num_classes: usize,
    pub distill_mode: DistillMode,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, backbone: BackboneConfig, num_classes: usize) -> Self {
        Self {
            kind,
            backbone,
            num_classes,
            distill_mode: DistillMode::default(),
        }
    }

    /// Full-size NYUv2 network with 13 classes.
    pub fn nyuv2(kind: ModelKind) -> Self {
        Self::new(kind, BackboneConfig::default(), 13)
    }

    pub fn tiny(kind: ModelKind, num_classes: usize) -> Self {
        Self::new(kind, BackboneConfig::tiny(), num_classes)
    }

    pub fn with_distill_mode(mut self, mode: DistillMode) -> Self {
        self.distill_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.num_classes < 2 {
            return Err(invalid!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            ));
        }
        Ok(())
    }
}

/// One output convolution per task on the task's full-resolution features.
/// Normals are L2-normalised per pixel; depth is linear.
#[derive(Clone, Debug)]
pub struct PredictionHeads {
    pub convs: PerTask<Option<Conv2d>>,
}

impl PredictionHeads {
    pub fn new(
        store: &mut ParamStore,
        tasks: &[TaskId],
        channels: usize,
        num_classes: usize,
        seed: u64,
    ) -> Self {
        let mut convs: PerTask<Option<Conv2d>> = PerTask(Default::default());
        for &t in tasks {
            let out = match t {
                TaskId::Segmentation => num_classes,
                TaskId::Depth => 1,
                TaskId::Normals => 3,
            };
            convs[t] = Some(Conv2d::new(
                store,
                &format!("heads.{}", t.short()),
                ParamGroup::Heads,
                channels,
                out,
                1,
                seed,
            ));
        }
        Self { convs }
    }

    pub fn forward(&self, ctx: &Ctx, task: TaskId, features: &Var) -> Result<Var> {
        let conv = self.convs[task]
            .as_ref()
            .ok_or_else(|| invalid!("model has no {task} head"))?;
        let y = conv.forward(ctx, features)?;
        match task {
            TaskId::Normals => ctx.l2_normalize(&y),
            _ => Ok(y),
        }
    }
}

/// One value per model, so the variant size gap does not matter.
#[allow(clippy::large_enum_variant)]
#[derive(Clone, Debug)]
enum Body {
    /// Shared encoder and decoder; used by one_task and split.
    Plain { encoder: Encoder, decoder: Decoder },
    /// mtan, and atinet when `distill` is present.
    Attention {
        encoder: Encoder,
        decoder: Decoder,
        attention: Attention,
        distill: Option<LatentDistillation>,
    },
    PadNet {
        encoder: Encoder,
        decoders: Vec<Decoder>,
        passing: MessagePassing,
    },
}

/// Outputs of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Predictions {
    pub outputs: BTreeMap<TaskId, Var>,
    /// PAD-Net only: per-task decoder features before distillation.
    pub initial: Option<PerTask<Var>>,
}

impl Predictions {
    pub fn get(&self, task: TaskId) -> Option<&Var> {
        self.outputs.get(&task)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub groups: BTreeMap<ParamGroup, usize>,
    pub total: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub heads: PredictionHeads,
    body: Body,
}

impl Model {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = &config.backbone;
        let mut store = ParamStore::new();
        let body = match config.kind {
            ModelKind::OneTask(_) => Body::Plain {
                encoder: Encoder::new(&mut store, "encoder", cfg, seed),
                decoder: Decoder::new(&mut store, "decoder", cfg, seed),
            },
            ModelKind::Split => {
                let deep = cfg.deepened();
                Body::Plain {
                    encoder: Encoder::new(&mut store, "encoder", &deep, seed),
                    decoder: Decoder::new(&mut store, "decoder", &deep, seed),
                }
            }
            ModelKind::Mtan | ModelKind::AtiNet => {
                let encoder = Encoder::new(&mut store, "encoder", cfg, seed);
                let decoder = Decoder::new(&mut store, "decoder", cfg, seed);
                let attention = Attention::new(&mut store, "attention", cfg, seed);
                let distill = match config.kind {
                    ModelKind::AtiNet => Some(LatentDistillation::new(
                        &mut store,
                        "distill",
                        cfg.bottleneck_channels(),
                        config.distill_mode,
                        seed,
                    )?),
                    _ => None,
                };
                Body::Attention {
                    encoder,
                    decoder,
                    attention,
                    distill,
                }
            }
            ModelKind::PadNet => {
                let encoder = Encoder::new(&mut store, "encoder", cfg, seed);
                let decoders = TaskId::ALL
                    .iter()
                    .map(|t| Decoder::new(&mut store, &format!("decoder.{}", t.short()), cfg, seed))
                    .collect();
                let passing = MessagePassing::new(
                    &mut store,
                    "distill",
                    DistillMode::GatedMessage,
                    cfg.stage_channels[0],
                    seed,
                );
                Body::PadNet {
                    encoder,
                    decoders,
                    passing,
                }
            }
        };
        let heads = PredictionHeads::new(
            &mut store,
            &config.kind.tasks(),
            cfg.stage_channels[0],
            config.num_classes,
            seed,
        );
        Ok(Self {
            config: config.clone(),
            store,
            heads,
            body,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn tasks(&self) -> Vec<TaskId> {
        self.config.kind.tasks()
    }

    /// Runs the network. `distillation_active` only affects atinet: when it
    /// is false the bottleneck goes straight to the decoder.
    pub fn forward(
        &self,
        ctx: &Ctx,
        images: &Var,
        distillation_active: bool,
    ) -> Result<Predictions> {
        if images.shape().len() != 4 {
            return Err(invalid!(
                "images must be (B,C,H,W), got {:?}",
                images.shape()
            ));
        }
        let mut out = Predictions::default();
        match &self.body {
            Body::Plain { encoder, decoder } => {
                let trace = encoder.encode(ctx, images)?;
                let dec = decoder.decode(ctx, &trace.bottleneck, &trace)?;
                for t in self.tasks() {
                    out.outputs
                        .insert(t, self.heads.forward(ctx, t, dec.output())?);
                }
            }
            Body::Attention {
                encoder,
                decoder,
                attention,
                distill,
            } => {
                let trace = encoder.encode(ctx, images)?;
                let bottleneck = match distill {
                    Some(d) if distillation_active => d.forward(ctx, &trace.bottleneck)?,
                    _ => trace.bottleneck.clone(),
                };
                let dec = decoder.decode(ctx, &bottleneck, &trace)?;
                for t in TaskId::ALL {
                    let features = attention.apply(ctx, t, &trace, &dec)?;
                    out.outputs
                        .insert(t, self.heads.forward(ctx, t, &features)?);
                }
            }
            Body::PadNet {
                encoder,
                decoders,
                passing,
            } => {
                let trace = encoder.encode(ctx, images)?;
                let initial = PerTask::try_from_fn(|t| {
                    decoders[t.index()]
                        .decode(ctx, &trace.bottleneck, &trace)
                        .map(|d| d.output().clone())
                })?;
                let refined = padnet_distill(ctx, passing, &initial)?;
                for t in TaskId::ALL {
                    out.outputs
                        .insert(t, self.heads.forward(ctx, t, &refined[t])?);
                }
                out.initial = Some(initial);
            }
        }
        Ok(out)
    }

    pub fn count_parameters(&self) -> ParamCount {
        let groups: BTreeMap<ParamGroup, usize> = ParamGroup::ALL
            .iter()
            .map(|&g| (g, self.store.numel_in(g)))
            .collect();
        ParamCount {
            groups,
            total: self.store.numel(),
        }
    }

    pub fn param_ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.store.ids_in(group)
    }

    /// Re-draws every attention parameter and returns the ids touched.
    /// Variants without attention return an empty list.
    pub fn reset_attention(&mut self, seed: u64) -> Vec<ParamId> {
        match &self.body {
            Body::Attention { attention, .. } => {
                attention.reset_parameters(&mut self.store, seed);
                attention.param_ids()
            }
            _ => Vec::new(),
        }
    }

    /// Copies every parameter and running statistic whose name and shape
    /// also exist in `other`. Returns the number of tensors copied.
    pub fn copy_shared_from(&mut self, other: &Model) -> usize {
        let mut copied = 0;
        for p in other.store.params() {
            if let Some(id) = self.store.find(&p.name) {
                if self.store.param(id).value().shape() == p.value().shape() {
                    *self.store.param_mut(id).value_mut() = p.value().clone();
                    copied += 1;
                }
            }
        }
        let theirs: BTreeMap<&str, _> = other
            .store
            .buffers()
            .iter()
            .map(|b| (b.name.as_str(), &b.value))
            .collect();
        for b in self.store.buffers_mut() {
            if let Some(v) = theirs.get(b.name.as_str()) {
                if v.shape() == b.value.shape() {
                    b.value = (*v).clone();
                    copied += 1;
                }
            }
        }
        copied
    }
}
