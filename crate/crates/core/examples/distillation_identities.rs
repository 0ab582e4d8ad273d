//! Demonstrates the two closed-form identities of the message-passing
//! block: zero gates add exactly one, zero messages pass features through.

use atinet::datamodel::{PerTask, TaskId};
use atinet::distillation::{DistillMode, MessagePassing};
use atinet::nn::{Ctx, ParamStore, Var};
use atinet::Tensor;

fn features() -> PerTask<Var> {
    PerTask::try_from_fn(|t| {
        let data = (0..2 * 8 * 4 * 4)
            .map(|i| ((i * 7 + t.index() * 13) % 19) as f32 / 3.0 - 3.0)
            .collect();
        Ok::<_, atinet::Error>(Var::constant(Tensor::from_vec(&[2, 8, 4, 4], data)?))
    })
    .expect("fixed shape")
}

fn main() -> atinet::Result<()> {
    let f = features();

    let mut store = ParamStore::new();
    let additive = MessagePassing::new(&mut store, "demo", DistillMode::AdditiveGate, 8, 0);
    for conv in additive.gates.iter().flatten().flatten() {
        conv.zero(&mut store);
    }
    let out = additive.forward(&Ctx::eval(&store), &f)?;
    for t in TaskId::ALL {
        let shift: Vec<f32> = out[t]
            .value()
            .data()
            .iter()
            .zip(f[t].value().data())
            .map(|(o, i)| o - i)
            .collect();
        let exact = out[t]
            .value()
            .data()
            .iter()
            .zip(f[t].value().data())
            .all(|(o, i)| *o == i + 1.0);
        println!(
            "additive_gate, zero gates, {:<12} F_o - F in [{}, {}], exactly F + 1: {exact}",
            t.name(),
            shift.iter().copied().fold(f32::INFINITY, f32::min),
            shift.iter().copied().fold(f32::NEG_INFINITY, f32::max)
        );
    }

    let mut store = ParamStore::new();
    let gated = MessagePassing::new(&mut store, "demo", DistillMode::GatedMessage, 8, 0);
    for conv in gated.messages.iter().flatten().flatten() {
        conv.zero(&mut store);
    }
    let out = gated.forward(&Ctx::eval(&store), &f)?;
    for t in TaskId::ALL {
        println!(
            "gated_message, zero messages, {:<12} max|F_o - F| = {}",
            t.name(),
            out[t].value().max_abs_diff(f[t].value())
        );
    }
    Ok(())
}
