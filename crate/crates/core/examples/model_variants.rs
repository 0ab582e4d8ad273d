//! Builds every model variant at the tiny size, runs one forward pass and
//! checks that atinet reproduces mtan while distillation is off.

use atinet::datamodel::TaskId;
use atinet::models::{Model, ModelConfig, ModelKind};
use atinet::nn::{Ctx, Var};
use atinet::Tensor;

fn main() -> atinet::Result<()> {
    let x = Var::constant(Tensor::full(&[2, 3, 32, 32], 0.5));
    let kinds = [
        ModelKind::OneTask(TaskId::Depth),
        ModelKind::Split,
        ModelKind::Mtan,
        ModelKind::PadNet,
        ModelKind::AtiNet,
    ];
    for kind in kinds {
        let model = Model::build(&ModelConfig::tiny(kind, 5), 0)?;
        let preds = model.forward(&Ctx::eval(&model.store), &x, true)?;
        let shapes: Vec<String> = preds
            .outputs
            .iter()
            .map(|(t, v)| format!("{}{:?}", t.short(), v.shape()))
            .collect();
        println!(
            "{:<16} {:>9} params  {}",
            kind.to_string(),
            model.count_parameters().total,
            shapes.join(" ")
        );
    }

    let mtan = Model::build(&ModelConfig::tiny(ModelKind::Mtan, 5), 1)?;
    let mut ati = Model::build(&ModelConfig::tiny(ModelKind::AtiNet, 5), 2)?;
    ati.copy_shared_from(&mtan);
    let a = mtan.forward(&Ctx::eval(&mtan.store), &x, false)?;
    let b = ati.forward(&Ctx::eval(&ati.store), &x, false)?;
    let same = TaskId::ALL
        .iter()
        .all(|&t| a.get(t).unwrap().value() == b.get(t).unwrap().value());
    println!("atinet with distillation off equals mtan bit for bit: {same}");
    Ok(())
}
