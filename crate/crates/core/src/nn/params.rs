use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub usize);

/// Named partition of the trainable parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    Attention,
    Distillation,
    Heads,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Backbone,
        ParamGroup::Attention,
        ParamGroup::Distillation,
        ParamGroup::Heads,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Attention => "attention",
            ParamGroup::Distillation => "distillation",
            ParamGroup::Heads => "heads",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    HeUniform {
        fan_in: usize,
    },
    /// `U(-b, b)` with `b = 1 / sqrt(fan_in)`.
    BiasUniform {
        fan_in: usize,
    },
    Constant(f32),
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub init: Init,
    value: Arc<Tensor>,
}

impl Param {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub(crate) fn shared_value(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.value)
    }
}

#[derive(Clone, Debug)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
}

/// Owns every trainable parameter and non-trainable buffer of a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: Vec<Buffer>,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

fn draw(init: Init, shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    match init {
        Init::Constant(v) => Tensor::full(shape, v),
        Init::HeUniform { fan_in } | Init::BiasUniform { fan_in } => {
            let bound = match init {
                Init::HeUniform { .. } => (6.0 / fan_in as f64).sqrt(),
                _ => 1.0 / (fan_in as f64).sqrt(),
            } as f32;
            let mut t = Tensor::zeros(shape);
            for v in t.data_mut() {
                *v = rng.gen_range(-bound..bound);
            }
            t
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Its initial value is a pure function of
    /// `(seed, name)`, so structurally shared parts of different model
    /// variants start from identical values.
    pub fn add(
        &mut self,
        name: &str,
        group: ParamGroup,
        shape: &[usize],
        init: Init,
        seed: u64,
    ) -> ParamId {
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, name));
        let value = draw(init, shape, &mut rng);
        self.params.push(Param {
            name: name.to_string(),
            group,
            init,
            value: Arc::new(value),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> BufferId {
        self.buffers.push(Buffer {
            name: name.to_string(),
            value,
        });
        BufferId(self.buffers.len() - 1)
    }

    /// Re-draws one parameter from its initialization distribution.
    pub fn reinit(&mut self, id: ParamId, seed: u64) {
        let p = &mut self.params[id.0];
        let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &p.name));
        let shape = p.value.shape().to_vec();
        p.value = Arc::new(draw(p.init, &shape, &mut rng));
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn ids_in(&self, group: ParamGroup) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.params[id.0].group == group)
            .collect()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].value
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer] {
        &mut self.buffers
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn numel_in(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Order-sensitive digest of every parameter in `group`.
    pub fn checksum(&self, group: ParamGroup) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Per-parameter gradients produced by one backward pass. Parameters that
/// did not take part in the graph have no entry.
#[derive(Clone, Debug)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn new(len: usize) -> Self {
        Self {
            grads: vec![None; len],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: Tensor) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// L2 norm over all gradients of a group (missing entries count as zero).
    pub fn group_norm(&self, store: &ParamStore, group: ParamGroup) -> f64 {
        store
            .ids_in(group)
            .into_iter()
            .filter_map(|id| self.get(id))
            .map(Tensor::sq_norm)
            .sum::<f64>()
            .sqrt()
    }
}
