//! Task-prediction distillation.
//!
//! The latent variant squeezes the bottleneck into three small per-task
//! feature maps, lets every task gather gated information from the other
//! two, re-expands each map to the bottleneck width and averages them. The
//! full-resolution variant applies the same message passing to the outputs
//! of three task decoders.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datamodel::{PerTask, TaskId};
use crate::error::{invalid, Error, Result};
use crate::nn::{run_blocks, Conv2d, ConvBlock, Ctx, ParamGroup, ParamId, ParamStore, Var};

/// Number of 1×1 layers in a deconv head and in a re-encoder.
pub const DISTILL_DEPTH: usize = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    /// `F_o^k = F^k + Σ_l σ(g_lk(F^l))`
    #[default]
    AdditiveGate,
    /// `F_o^k = F^k + Σ_l σ(g_lk(F^l)) ⊙ m_lk(F^l)`
    GatedMessage,
}

impl DistillMode {
    pub fn name(self) -> &'static str {
        match self {
            DistillMode::AdditiveGate => "additive_gate",
            DistillMode::GatedMessage => "gated_message",
        }
    }
}

impl fmt::Display for DistillMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DistillMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "additive_gate" => Ok(DistillMode::AdditiveGate),
            "gated_message" => Ok(DistillMode::GatedMessage),
            _ => Err(invalid!(
                "unknown distill mode {s:?} (expected additive_gate or gated_message)"
            )),
        }
    }
}

/// Channel widths `c, c/2, c/4, c/8` of the deconv head.
pub fn head_schedule(bottleneck: usize) -> [usize; DISTILL_DEPTH + 1] {
    [bottleneck, bottleneck / 2, bottleneck / 4, bottleneck / 8]
}

fn check_same_shape(features: &PerTask<Var>, channels: usize) -> Result<()> {
    let shape = features[TaskId::Segmentation].shape();
    for (t, f) in features.iter() {
        if f.shape().len() != 4 || f.shape() != shape {
            return Err(invalid!(
                "{t} features {:?} differ from {:?}",
                f.shape(),
                shape
            ));
        }
    }
    if shape[1] != channels {
        return Err(invalid!(
            "features have {} channels, expected {channels}",
            shape[1]
        ));
    }
    Ok(())
}

/// Three 1×1 conv/BN/ReLU layers reducing the bottleneck width by 8.
#[derive(Clone, Debug)]
pub struct DeconvHead {
    pub blocks: Vec<ConvBlock>,
}

impl DeconvHead {
    pub fn new(store: &mut ParamStore, name: &str, bottleneck: usize, seed: u64) -> Self {
        let ch = head_schedule(bottleneck);
        let blocks = (0..DISTILL_DEPTH)
            .map(|i| {
                ConvBlock::relu(
                    store,
                    &format!("{name}.l{i}"),
                    ParamGroup::Distillation,
                    ch[i],
                    ch[i + 1],
                    1,
                    seed,
                )
            })
            .collect();
        Self { blocks }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        run_blocks(ctx, &self.blocks, x)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(ConvBlock::param_ids).collect()
    }
}

/// Mirror of [`DeconvHead`]: three 1×1 conv/BN/ReLU layers widening by 8.
#[derive(Clone, Debug)]
pub struct ReEncoder {
    pub blocks: Vec<ConvBlock>,
}

impl ReEncoder {
    pub fn new(store: &mut ParamStore, name: &str, bottleneck: usize, seed: u64) -> Self {
        let mut ch = head_schedule(bottleneck);
        ch.reverse();
        let blocks = (0..DISTILL_DEPTH)
            .map(|i| {
                ConvBlock::relu(
                    store,
                    &format!("{name}.l{i}"),
                    ParamGroup::Distillation,
                    ch[i],
                    ch[i + 1],
                    1,
                    seed,
                )
            })
            .collect();
        Self { blocks }
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        run_blocks(ctx, &self.blocks, x)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(ConvBlock::param_ids).collect()
    }
}

/// Gate (and optional message) convs for the six ordered task pairs.
#[derive(Clone, Debug)]
pub struct MessagePassing {
    pub mode: DistillMode,
    pub channels: usize,
    /// `gates[target][source]`, `None` on the diagonal.
    pub gates: [[Option<Conv2d>; 3]; 3],
    pub messages: [[Option<Conv2d>; 3]; 3],
}

impl MessagePassing {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        mode: DistillMode,
        channels: usize,
        seed: u64,
    ) -> Self {
        let mut gates: [[Option<Conv2d>; 3]; 3] = Default::default();
        let mut messages: [[Option<Conv2d>; 3]; 3] = Default::default();
        for k in TaskId::ALL {
            for l in k.auxiliaries() {
                let pair = format!("{}_to_{}", l.short(), k.short());
                gates[k.index()][l.index()] = Some(Conv2d::new(
                    store,
                    &format!("{prefix}.gate.{pair}"),
                    ParamGroup::Distillation,
                    channels,
                    channels,
                    3,
                    seed,
                ));
                if mode == DistillMode::GatedMessage {
                    messages[k.index()][l.index()] = Some(Conv2d::new(
                        store,
                        &format!("{prefix}.message.{pair}"),
                        ParamGroup::Distillation,
                        channels,
                        channels,
                        3,
                        seed,
                    ));
                }
            }
        }
        Self {
            mode,
            channels,
            gates,
            messages,
        }
    }

    /// Gate conv carrying information from `source` into `target`.
    pub fn gate(&self, source: TaskId, target: TaskId) -> Option<&Conv2d> {
        self.gates[target.index()][source.index()].as_ref()
    }

    pub fn message(&self, source: TaskId, target: TaskId) -> Option<&Conv2d> {
        self.messages[target.index()][source.index()].as_ref()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.gates
            .iter()
            .chain(&self.messages)
            .flatten()
            .flatten()
            .flat_map(|c| c.param_ids())
            .collect()
    }

    /// Refines each task's features with gated terms from the other two.
    /// The auxiliary terms are summed first and then added to `F^k`.
    pub fn forward(&self, ctx: &Ctx, features: &PerTask<Var>) -> Result<PerTask<Var>> {
        check_same_shape(features, self.channels)?;
        PerTask::try_from_fn(|k| {
            let mut acc: Option<Var> = None;
            for l in k.auxiliaries() {
                let src = &features[l];
                let gate = self.gate(l, k).expect("gate for every ordered pair");
                let g = ctx.sigmoid(&gate.forward(ctx, src)?);
                let term = match self.message(l, k) {
                    Some(m) => ctx.mul(&g, &m.forward(ctx, src)?)?,
                    None => g,
                };
                acc = Some(match acc {
                    None => term,
                    Some(a) => ctx.add(&a, &term)?,
                });
            }
            ctx.add(&features[k], &acc.expect("two auxiliaries"))
        })
    }
}

/// The distillation stack that sits between the shared encoder and decoder.
#[derive(Clone, Debug)]
pub struct LatentDistillation {
    pub heads: Vec<DeconvHead>,
    pub passing: MessagePassing,
    pub reencoders: Vec<ReEncoder>,
    pub bottleneck_channels: usize,
}

impl LatentDistillation {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        bottleneck: usize,
        mode: DistillMode,
        seed: u64,
    ) -> Result<Self> {
        if bottleneck < 8 || !bottleneck.is_multiple_of(8) {
            return Err(invalid!(
                "bottleneck width {bottleneck} must be a positive multiple of 8"
            ));
        }
        let heads = TaskId::ALL
            .iter()
            .map(|t| {
                DeconvHead::new(
                    store,
                    &format!("{prefix}.head.{}", t.short()),
                    bottleneck,
                    seed,
                )
            })
            .collect();
        let passing = MessagePassing::new(store, prefix, mode, bottleneck / 8, seed);
        let reencoders = TaskId::ALL
            .iter()
            .map(|t| {
                ReEncoder::new(
                    store,
                    &format!("{prefix}.reenc.{}", t.short()),
                    bottleneck,
                    seed,
                )
            })
            .collect();
        Ok(Self {
            heads,
            passing,
            reencoders,
            bottleneck_channels: bottleneck,
        })
    }

    pub fn mode(&self) -> DistillMode {
        self.passing.mode
    }

    pub fn initial_prediction_features(&self, ctx: &Ctx, bottleneck: &Var) -> Result<PerTask<Var>> {
        if bottleneck.shape().len() != 4 || bottleneck.shape()[1] != self.bottleneck_channels {
            return Err(invalid!(
                "bottleneck {:?} does not have {} channels",
                bottleneck.shape(),
                self.bottleneck_channels
            ));
        }
        PerTask::try_from_fn(|t| self.heads[t.index()].forward(ctx, bottleneck))
    }

    pub fn distill(&self, ctx: &Ctx, features: &PerTask<Var>) -> Result<PerTask<Var>> {
        self.passing.forward(ctx, features)
    }

    pub fn reencode_and_average(&self, ctx: &Ctx, refined: &PerTask<Var>) -> Result<Var> {
        check_same_shape(refined, self.bottleneck_channels / 8)?;
        let maps = TaskId::ALL
            .iter()
            .map(|t| self.reencoders[t.index()].forward(ctx, &refined[*t]))
            .collect::<Result<Vec<_>>>()?;
        ctx.mean(&maps)
    }

    /// Bottleneck in, distilled bottleneck of the same shape out.
    pub fn forward(&self, ctx: &Ctx, bottleneck: &Var) -> Result<Var> {
        let initial = self.initial_prediction_features(ctx, bottleneck)?;
        let refined = self.distill(ctx, &initial)?;
        self.reencode_and_average(ctx, &refined)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.heads.iter().flat_map(DeconvHead::param_ids).collect();
        ids.extend(self.passing.param_ids());
        ids.extend(self.reencoders.iter().flat_map(ReEncoder::param_ids));
        ids
    }
}

/// Full-resolution message passing over the outputs of three task decoders;
/// always uses gate and message convs.
pub fn padnet_distill(
    ctx: &Ctx,
    passing: &MessagePassing,
    features: &PerTask<Var>,
) -> Result<PerTask<Var>> {
    if passing.mode != DistillMode::GatedMessage {
        return Err(invalid!(
            "full-resolution distillation requires gated_message convs"
        ));
    }
    passing.forward(ctx, features)
}
