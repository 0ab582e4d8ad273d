use super::params::{Grads, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

/// Adam without weight decay. State is created lazily per parameter on its
/// first gradient; parameters without a gradient in a step are left alone.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    slots: Vec<Option<AdamSlot>>,
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            slots: vec![None; num_params],
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f32) {
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let slot = self.slots[id.0].get_or_insert_with(|| AdamSlot {
                m: vec![0.0; g.numel()],
                v: vec![0.0; g.numel()],
                step: 0,
            });
            slot.step += 1;
            let bc1 = 1.0 - (b1 as f64).powi(slot.step as i32);
            let bc2 = 1.0 - (b2 as f64).powi(slot.step as i32);
            let step_size = (lr as f64 / bc1) as f32;
            let bc2_sqrt = bc2.sqrt() as f32;
            let p = store.param_mut(id).value_mut().data_mut();
            for (((p, g), m), v) in p.iter_mut().zip(g.data()).zip(&mut slot.m).zip(&mut slot.v) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let denom = v.sqrt() / bc2_sqrt + eps;
                *p -= step_size * *m / denom;
            }
        }
    }

    /// Drops moment estimates and step counts for `ids`.
    pub fn clear(&mut self, ids: &[ParamId]) {
        for id in ids {
            self.slots[id.0] = None;
        }
    }

    pub fn slot(&self, id: ParamId) -> Option<&AdamSlot> {
        self.slots[id.0].as_ref()
    }

    pub fn slots(&self) -> &[Option<AdamSlot>] {
        &self.slots
    }

    pub(crate) fn from_slots(slots: Vec<Option<AdamSlot>>) -> Self {
        Self {
            slots,
            ..Self::new(0)
        }
    }
}
