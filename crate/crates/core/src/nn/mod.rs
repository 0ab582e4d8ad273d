//! Minimal CPU tensor autodiff: the kernels, tape, parameter store and
//! optimizer that the networks are built on.

mod adam;
pub mod kernels;
mod layers;
mod params;
mod tape;

pub use adam::{Adam, AdamSlot};
pub use layers::{run_blocks, Activation, BatchNorm2d, Conv2d, ConvBlock};
pub use params::{Buffer, BufferId, Grads, Init, Param, ParamGroup, ParamId, ParamStore};
pub use tape::{BnUpdates, Ctx, PoolIndices, Var, BN_MOMENTUM};
