//! Task-specific attention over the shared backbone, in the MTAN layout.
//!
//! Each task owns five encoder-side and five decoder-side gates (two 1×1
//! conv blocks ending in a sigmoid). The 3×3 conv blocks that carry the
//! attended features from one stage to the next are shared by all tasks.
//!
//! Encoder stage `s`: `g = gate(cat(entry_s, prev))`, `a = g ⊙ feature_s`,
//! `prev = maxpool(refine(a))`. Decoder level `s` (deepest first):
//! `r = refine(upsample(prev))`, `g = gate(cat(input_s, r))`,
//! `prev = g ⊙ output_s`. The last `prev` is the task feature map.

use crate::backbone::{BackboneConfig, DecoderTrace, EncoderTrace, NUM_STAGES};
use crate::datamodel::TaskId;
use crate::error::{invalid, Result};
use crate::nn::{Activation, ConvBlock, Ctx, ParamGroup, ParamId, ParamStore, Var};

/// Sigmoid gate: 1×1 conv/BN/ReLU followed by 1×1 conv/BN/sigmoid.
#[derive(Clone, Debug)]
pub struct AttentionModule {
    pub hidden: ConvBlock,
    pub gate: ConvBlock,
}

impl AttentionModule {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, channels: usize, seed: u64) -> Self {
        let group = ParamGroup::Attention;
        Self {
            hidden: ConvBlock::new(
                store,
                &format!("{name}.hidden"),
                group,
                cin,
                channels,
                1,
                Activation::Relu,
                seed,
            ),
            gate: ConvBlock::new(
                store,
                &format!("{name}.gate"),
                group,
                channels,
                channels,
                1,
                Activation::Sigmoid,
                seed,
            ),
        }
    }

    /// Gate values in (0, 1), one per element of the attended features.
    pub fn gate_values(&self, ctx: &Ctx, input: &Var) -> Result<Var> {
        let h = self.hidden.forward(ctx, input)?;
        self.gate.forward(ctx, &h)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.hidden.param_ids();
        ids.extend(self.gate.param_ids());
        ids
    }
}

#[derive(Clone, Debug)]
pub struct TaskAttentionPath {
    pub task: TaskId,
    pub encoder_modules: Vec<AttentionModule>,
    /// Deepest level first.
    pub decoder_modules: Vec<AttentionModule>,
}

impl TaskAttentionPath {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        task: TaskId,
        cfg: &BackboneConfig,
        seed: u64,
    ) -> Self {
        let c = &cfg.stage_channels;
        let encoder_modules = (0..NUM_STAGES)
            .map(|s| {
                let cin = if s == 0 { c[0] } else { 2 * c[s] };
                AttentionModule::new(
                    store,
                    &format!("{prefix}.{}.enc{s}", task.short()),
                    cin,
                    c[s],
                    seed,
                )
            })
            .collect();
        let decoder_modules = (0..NUM_STAGES)
            .rev()
            .map(|s| {
                let d = cfg.decoder_channels(s);
                AttentionModule::new(
                    store,
                    &format!("{prefix}.{}.dec{s}", task.short()),
                    c[s] + d,
                    d,
                    seed,
                )
            })
            .collect();
        Self {
            task,
            encoder_modules,
            decoder_modules,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.encoder_modules
            .iter()
            .chain(&self.decoder_modules)
            .flat_map(AttentionModule::param_ids)
            .collect()
    }

    /// Re-draws this path's gates from their initial distribution.
    pub fn reset_parameters(&self, store: &mut ParamStore, seed: u64) {
        for id in self.param_ids() {
            store.reinit(id, seed);
        }
    }
}

/// 3×3 conv blocks that move attended features between stages.
#[derive(Clone, Debug)]
pub struct SharedRefiners {
    pub encoder: Vec<ConvBlock>,
    /// Deepest level first.
    pub decoder: Vec<ConvBlock>,
}

impl SharedRefiners {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &BackboneConfig, seed: u64) -> Self {
        let c = &cfg.stage_channels;
        let group = ParamGroup::Attention;
        let encoder = (0..NUM_STAGES)
            .map(|s| {
                let out = if s + 1 < NUM_STAGES { c[s + 1] } else { c[s] };
                ConvBlock::relu(
                    store,
                    &format!("{prefix}.refine.enc{s}"),
                    group,
                    c[s],
                    out,
                    3,
                    seed,
                )
            })
            .collect();
        let decoder = (0..NUM_STAGES)
            .rev()
            .map(|s| {
                let cin = if s + 1 < NUM_STAGES {
                    cfg.decoder_channels(s + 1)
                } else {
                    c[NUM_STAGES - 1]
                };
                ConvBlock::relu(
                    store,
                    &format!("{prefix}.refine.dec{s}"),
                    group,
                    cin,
                    cfg.decoder_channels(s),
                    3,
                    seed,
                )
            })
            .collect();
        Self { encoder, decoder }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.encoder
            .iter()
            .chain(&self.decoder)
            .flat_map(ConvBlock::param_ids)
            .collect()
    }
}

/// All attention of a multi-task network: one path per task plus the shared
/// refiners.
#[derive(Clone, Debug)]
pub struct Attention {
    pub paths: Vec<TaskAttentionPath>,
    pub refiners: SharedRefiners,
}

impl Attention {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &BackboneConfig, seed: u64) -> Self {
        let paths = TaskId::ALL
            .iter()
            .map(|&t| TaskAttentionPath::new(store, prefix, t, cfg, seed))
            .collect();
        let refiners = SharedRefiners::new(store, prefix, cfg, seed);
        Self { paths, refiners }
    }

    pub fn path(&self, task: TaskId) -> &TaskAttentionPath {
        &self.paths[task.index()]
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .paths
            .iter()
            .flat_map(TaskAttentionPath::param_ids)
            .collect();
        ids.extend(self.refiners.param_ids());
        ids
    }

    /// Re-draws every attention parameter (gates and refiners).
    pub fn reset_parameters(&self, store: &mut ParamStore, seed: u64) {
        for id in self.param_ids() {
            store.reinit(id, seed);
        }
    }

    pub fn apply(
        &self,
        ctx: &Ctx,
        task: TaskId,
        enc: &EncoderTrace,
        dec: &DecoderTrace,
    ) -> Result<Var> {
        apply_attention_path(ctx, enc, dec, self.path(task), &self.refiners)
    }
}

fn same_spatial(a: &Var, b: &Var, what: &str) -> Result<()> {
    let (an, _, ah, aw) = a.dims4();
    let (bn, _, bh, bw) = b.dims4();
    if (an, ah, aw) != (bn, bh, bw) {
        return Err(invalid!(
            "{what}: cascade {:?} vs stage {:?}",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

/// Runs one task's attention cascade over the shared encoder and decoder
/// activations and returns its full-resolution feature map.
pub fn apply_attention_path(
    ctx: &Ctx,
    enc: &EncoderTrace,
    dec: &DecoderTrace,
    path: &TaskAttentionPath,
    refiners: &SharedRefiners,
) -> Result<Var> {
    if enc.stage_features.len() != NUM_STAGES || dec.stage_outputs.len() != NUM_STAGES {
        return Err(invalid!(
            "attention needs five encoder and five decoder stages"
        ));
    }
    let mut prev: Option<Var> = None;
    for s in 0..NUM_STAGES {
        let entry = &enc.stage_entries[s];
        let input = match &prev {
            None => entry.clone(),
            Some(p) => {
                same_spatial(p, entry, "encoder attention")?;
                ctx.concat(&[entry, p])?
            }
        };
        let gate = path.encoder_modules[s].gate_values(ctx, &input)?;
        let attended = ctx.mul(&gate, &enc.stage_features[s])?;
        let refined = refiners.encoder[s].forward(ctx, &attended)?;
        prev = Some(ctx.max_pool2(&refined)?.0);
    }
    let mut prev = prev.expect("five encoder stages ran");
    for k in 0..NUM_STAGES {
        let up = ctx.upsample2(&prev)?;
        same_spatial(&up, &dec.stage_inputs[k], "decoder attention")?;
        let refined = refiners.decoder[k].forward(ctx, &up)?;
        let input = ctx.concat(&[&dec.stage_inputs[k], &refined])?;
        let gate = path.decoder_modules[k].gate_values(ctx, &input)?;
        prev = ctx.mul(&gate, &dec.stage_outputs[k])?;
    }
    Ok(prev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Decoder, Encoder};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Fixture {
        store: ParamStore,
        enc: Encoder,
        dec: Decoder,
        att: Attention,
    }

    fn fixture() -> Fixture {
        let cfg = BackboneConfig::tiny();
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "enc", &cfg, 3);
        let dec = Decoder::new(&mut store, "dec", &cfg, 3);
        let att = Attention::new(&mut store, "att", &cfg, 3);
        Fixture {
            store,
            enc,
            dec,
            att,
        }
    }

    fn input(seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::zeros(&[2, 3, 32, 32]);
        for v in t.data_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        Var::constant(t)
    }

    #[test]
    fn path_output_shape_is_full_resolution() {
        let f = fixture();
        let ctx = Ctx::eval(&f.store);
        let t = f.enc.encode(&ctx, &input(0)).unwrap();
        let d = f.dec.decode(&ctx, &t.bottleneck, &t).unwrap();
        for task in TaskId::ALL {
            let out = f.att.apply(&ctx, task, &t, &d).unwrap();
            assert_eq!(out.shape(), &[2, 8, 32, 32]);
        }
    }

    #[test]
    fn zeroed_gate_convs_give_one_half() {
        let mut f = fixture();
        let m = &f.att.paths[0].encoder_modules[2];
        m.gate.conv.zero(&mut f.store);
        let ctx = Ctx::eval(&f.store);
        let x = Var::constant(Tensor::full(&[1, 64, 8, 8], 0.7));
        let g = m.gate_values(&ctx, &x).unwrap();
        assert!(g.value().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn gates_are_strictly_inside_unit_interval() {
        let f = fixture();
        let ctx = Ctx::train(&f.store);
        let t = f.enc.encode(&ctx, &input(1)).unwrap();
        let m = &f.att.paths[1].encoder_modules[0];
        let g = m.gate_values(&ctx, &t.stage_entries[0]).unwrap();
        assert!(g.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_shared_features_give_zero_product() {
        let f = fixture();
        let ctx = Ctx::eval(&f.store);
        let gate = Var::constant(Tensor::full(&[1, 8, 4, 4], 0.3));
        let shared = Var::constant(Tensor::zeros(&[1, 8, 4, 4]));
        let p = ctx.mul(&gate, &shared).unwrap();
        assert!(p.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reset_is_seeded_and_scoped() {
        let f = fixture();
        let backbone_before = f.store.checksum(ParamGroup::Backbone);
        let mut a = f.store.clone();
        let mut b = f.store.clone();
        f.att.reset_parameters(&mut a, 99);
        f.att.reset_parameters(&mut b, 99);
        assert_eq!(
            a.checksum(ParamGroup::Attention),
            b.checksum(ParamGroup::Attention)
        );
        assert_eq!(a.checksum(ParamGroup::Backbone), backbone_before);
        for id in f.att.param_ids() {
            let p = f.store.param(id);
            if matches!(p.init, crate::nn::Init::Constant(_)) {
                continue;
            }
            let diff = a.param(id).value().max_abs_diff(p.value());
            assert!(diff > 0.0, "{} unchanged by reset", p.name);
        }
    }

    #[test]
    fn mismatched_cascade_is_rejected() {
        let f = fixture();
        let ctx = Ctx::eval(&f.store);
        let t = f.enc.encode(&ctx, &input(0)).unwrap();
        let mut d = f.dec.decode(&ctx, &t.bottleneck, &t).unwrap();
        d.stage_inputs[1] = Var::constant(Tensor::zeros(&[2, 64, 2, 2]));
        assert!(matches!(
            f.att.apply(&ctx, TaskId::Depth, &t, &d),
            Err(crate::Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn gradient_reaches_gates_and_refiners() {
        let f = fixture();
        let ctx = Ctx::train(&f.store);
        let t = f.enc.encode(&ctx, &input(2)).unwrap();
        let d = f.dec.decode(&ctx, &t.bottleneck, &t).unwrap();
        let out = f.att.apply(&ctx, TaskId::Normals, &t, &d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut r = Tensor::zeros(out.shape());
        for v in r.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let l = ctx.external_scalar(&out, 0.0, r).unwrap();
        let g = ctx.backward(&[(&l, 1.0)]).unwrap();
        let path = f.att.path(TaskId::Normals);
        for m in path.encoder_modules.iter().chain(&path.decoder_modules) {
            for conv in [&m.hidden.conv, &m.gate.conv] {
                assert!(g.get(conv.weight).unwrap().sq_norm() > 0.0);
            }
        }
        for r in f.att.refiners.encoder.iter().chain(&f.att.refiners.decoder) {
            assert!(g.get(r.conv.weight).unwrap().sq_norm() > 0.0);
        }
        // other tasks' gates are not on this path
        let seg = f.att.path(TaskId::Segmentation);
        assert!(g.get(seg.encoder_modules[0].gate.conv.weight).is_none());
    }
}
