//! Trains the tiny atinet on four synthetic scenes and reports how well it
//! fits them.
//!
//! ```text
//! cargo run --release --example train_tiny -- [epochs] [lr]
//! ```

use atinet::datamodel::{generate_synthetic, DatasetSpec, Split};
use atinet::models::{Model, ModelConfig, ModelKind};
use atinet::trainer::{evaluate, TrainConfig, Trainer};

fn main() -> atinet::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map_or(300, |s| s.parse().expect("epochs"));
    let lr: f64 = args.next().map_or(2e-2, |s| s.parse().expect("lr"));

    let spec = DatasetSpec::new("unused", Split::Train, 32, 32, 5);
    let train = generate_synthetic(4, &spec, 7, 0.1)?;
    let model = Model::build(&ModelConfig::tiny(ModelKind::AtiNet, 5), 7)?;
    let mut cfg = TrainConfig::with_epochs(epochs);
    cfg.lr = lr;
    cfg.seed = 7;
    let mut trainer = Trainer::new(model, cfg)?;

    let clock = std::time::Instant::now();
    while !trainer.is_finished() {
        let r = trainer.run_epoch(&train, None)?.clone();
        if r.epoch == 1 || r.epoch % 25 == 0 {
            let m = evaluate(&trainer.model, &train, 2, r.distillation_active)?;
            println!(
                "epoch {:>4}  loss {:.4} (seg {:.4} depth {:.4} normals {:.4})  pix_acc {:.3}  abs_err {:.4}  angle {:.2}  [{:.0}s]",
                r.epoch,
                r.total_loss,
                r.train_loss.0[0],
                r.train_loss.0[1],
                r.train_loss.0[2],
                m.pix_acc,
                m.abs_err,
                m.angle_mean,
                clock.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
