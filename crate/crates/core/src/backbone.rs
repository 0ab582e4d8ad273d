//! SegNet-style encoder/decoder. The encoder is the 13-convolution VGG-16
//! body with five 2×2 max-pool stages that keep their argmax indices; the
//! decoder mirrors it, upsampling with those indices. The final pixel-wise
//! classifier is not part of the backbone.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{run_blocks, ConvBlock, Ctx, ParamGroup, ParamStore, PoolIndices, Var};

pub const NUM_STAGES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    /// Scatter to the stored max-pool argmax locations.
    UnpoolIndices,
    /// Nearest-neighbour 2× upsampling.
    Nearest,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stage_channels: [usize; NUM_STAGES],
    pub convs_per_stage: [usize; NUM_STAGES],
    pub in_channels: usize,
    pub upsample_mode: UpsampleMode,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_channels: [64, 128, 256, 512, 512],
            convs_per_stage: [2, 2, 3, 3, 3],
            in_channels: 3,
            upsample_mode: UpsampleMode::UnpoolIndices,
        }
    }
}

impl BackboneConfig {
    /// Desk-scale widths with the default structure.
    pub fn tiny() -> Self {
        Self {
            stage_channels: [8, 16, 32, 64, 64],
            ..Self::default()
        }
    }

    /// Same widths with every convolution followed by a second one of the
    /// same output width.
    pub fn deepened(&self) -> Self {
        Self {
            convs_per_stage: self.convs_per_stage.map(|n| 2 * n),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.contains(&0)
            || self.convs_per_stage.contains(&0)
            || self.in_channels == 0
        {
            return Err(invalid!(
                "backbone channels and conv counts must be positive: {self:?}"
            ));
        }
        Ok(())
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.stage_channels[NUM_STAGES - 1]
    }

    /// Output channels of decoder level `s`.
    pub fn decoder_channels(&self, s: usize) -> usize {
        if s == 0 {
            self.stage_channels[0]
        } else {
            self.stage_channels[s - 1]
        }
    }

    /// Input channels of encoder stage `s`.
    pub fn encoder_in_channels(&self, s: usize) -> usize {
        if s == 0 {
            self.in_channels
        } else {
            self.stage_channels[s - 1]
        }
    }

    /// `(cin, cout)` of every encoder convolution, in order.
    pub fn encoder_layers(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for s in 0..NUM_STAGES {
            let c = self.stage_channels[s];
            out.push((self.encoder_in_channels(s), c));
            out.extend(std::iter::repeat_n((c, c), self.convs_per_stage[s] - 1));
        }
        out
    }

    /// `(cin, cout)` of every decoder convolution, deepest level first.
    pub fn decoder_layers(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for s in (0..NUM_STAGES).rev() {
            let d = self.decoder_channels(s);
            out.push((self.stage_channels[s], d));
            out.extend(std::iter::repeat_n((d, d), self.convs_per_stage[s] - 1));
        }
        out
    }

    /// Closed-form trainable parameter count of encoder + decoder: every
    /// 3×3 conv has `9·cin·cout + cout` weights and biases plus `2·cout`
    /// batch-norm parameters.
    pub fn param_count(&self) -> usize {
        self.encoder_layers()
            .into_iter()
            .chain(self.decoder_layers())
            .map(|(ci, co)| 9 * ci * co + co + 2 * co)
            .sum()
    }
}

/// Everything the encoder exposes to later blocks.
#[derive(Clone, Debug)]
pub struct EncoderTrace {
    /// Output of the first conv block of each stage.
    pub stage_entries: Vec<Var>,
    /// Pre-pool activations of each stage.
    pub stage_features: Vec<Var>,
    pub pool_indices: Vec<PoolIndices>,
    /// `(B, C₄, H/32, W/32)`.
    pub bottleneck: Var,
}

/// Decoder activations, deepest level first.
#[derive(Clone, Debug)]
pub struct DecoderTrace {
    /// Upsampled input of each level (before its convolutions).
    pub stage_inputs: Vec<Var>,
    /// Output of each level's last conv block.
    pub stage_outputs: Vec<Var>,
}

impl DecoderTrace {
    /// Full-resolution output of the shallowest level.
    pub fn output(&self) -> &Var {
        self.stage_outputs.last().expect("decoder has five levels")
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub stages: Vec<Vec<ConvBlock>>,
    cfg: BackboneConfig,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &BackboneConfig, seed: u64) -> Self {
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut layers = cfg.encoder_layers().into_iter();
        for s in 0..NUM_STAGES {
            let blocks = (0..cfg.convs_per_stage[s])
                .map(|j| {
                    let (ci, co) = layers.next().expect("layer list matches stage counts");
                    ConvBlock::relu(
                        store,
                        &format!("{prefix}.s{s}.c{j}"),
                        ParamGroup::Backbone,
                        ci,
                        co,
                        3,
                        seed,
                    )
                })
                .collect();
            stages.push(blocks);
        }
        Self {
            stages,
            cfg: cfg.clone(),
        }
    }

    pub fn encode(&self, ctx: &Ctx, x: &Var) -> Result<EncoderTrace> {
        let (_, c, h, w) = x.dims4();
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(invalid!("input {h}x{w} must be divisible by 32"));
        }
        if c != self.cfg.in_channels {
            return Err(invalid!(
                "input has {c} channels, backbone expects {}",
                self.cfg.in_channels
            ));
        }
        let mut stage_entries = Vec::with_capacity(NUM_STAGES);
        let mut stage_features = Vec::with_capacity(NUM_STAGES);
        let mut pool_indices = Vec::with_capacity(NUM_STAGES);
        let mut cur = x.clone();
        for blocks in &self.stages {
            let entry = blocks[0].forward(ctx, &cur)?;
            let feat = run_blocks(ctx, &blocks[1..], &entry)?;
            let (pooled, idx) = ctx.max_pool2(&feat)?;
            stage_entries.push(entry);
            stage_features.push(feat);
            pool_indices.push(idx);
            cur = pooled;
        }
        Ok(EncoderTrace {
            stage_entries,
            stage_features,
            pool_indices,
            bottleneck: cur,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    /// Conv blocks per level, deepest level first.
    pub levels: Vec<Vec<ConvBlock>>,
    cfg: BackboneConfig,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &BackboneConfig, seed: u64) -> Self {
        let mut layers = cfg.decoder_layers().into_iter();
        let levels = (0..NUM_STAGES)
            .rev()
            .map(|s| {
                (0..cfg.convs_per_stage[s])
                    .map(|j| {
                        let (ci, co) = layers.next().expect("layer list matches stage counts");
                        ConvBlock::relu(
                            store,
                            &format!("{prefix}.s{s}.c{j}"),
                            ParamGroup::Backbone,
                            ci,
                            co,
                            3,
                            seed,
                        )
                    })
                    .collect()
            })
            .collect();
        Self {
            levels,
            cfg: cfg.clone(),
        }
    }

    pub fn decode(
        &self,
        ctx: &Ctx,
        bottleneck: &Var,
        trace: &EncoderTrace,
    ) -> Result<DecoderTrace> {
        if bottleneck.shape() != trace.bottleneck.shape() {
            return Err(invalid!(
                "bottleneck {:?} does not match encoder trace {:?}",
                bottleneck.shape(),
                trace.bottleneck.shape()
            ));
        }
        let mut stage_inputs = Vec::with_capacity(NUM_STAGES);
        let mut stage_outputs = Vec::with_capacity(NUM_STAGES);
        let mut cur = bottleneck.clone();
        for (k, blocks) in self.levels.iter().enumerate() {
            let s = NUM_STAGES - 1 - k;
            let up = match self.cfg.upsample_mode {
                UpsampleMode::UnpoolIndices => ctx.max_unpool2(&cur, &trace.pool_indices[s])?,
                UpsampleMode::Nearest => ctx.upsample2(&cur)?,
            };
            let out = run_blocks(ctx, blocks, &up)?;
            stage_inputs.push(up);
            stage_outputs.push(out.clone());
            cur = out;
        }
        Ok(DecoderTrace {
            stage_inputs,
            stage_outputs,
        })
    }
}
