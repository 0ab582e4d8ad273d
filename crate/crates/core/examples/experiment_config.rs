//! Parses a key = value experiment config, applies overrides and prints the
//! resolved file that a run would write next to its outputs.

use atinet::config::ExperimentConfig;

const EXAMPLE: &str = "\
preset = tiny
# switch distillation on after a fifth of training
model = atinet
epochs = 50
distill_activation_epoch = 10
weighting = dwa
temperature = 2
";

fn main() -> atinet::Result<()> {
    let mut cfg = ExperimentConfig::parse(EXAMPLE)?;
    cfg.apply_overrides(&["lr=0.01", "distill_mode=gated_message"])?;
    cfg.validate()?;
    print!("{}", cfg.to_text());
    let t = cfg.train_config();
    println!(
        "# lr {} until epoch {}, then {}; distillation from epoch {}",
        t.lr,
        t.lr_decay_epoch,
        t.lr_at(t.lr_decay_epoch),
        t.distill_activation_epoch
    );
    match ExperimentConfig::parse("epochs = 3\nlearning_rate = 0.1") {
        Err(e) => println!("# rejected: {e}"),
        Ok(_) => unreachable!("unknown keys are rejected"),
    }
    Ok(())
}
