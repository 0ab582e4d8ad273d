//! Trains a few epochs, checkpoints, resumes from the checkpoint and shows
//! that the resumed run log matches an uninterrupted run.

use atinet::checkpoint;
use atinet::datamodel::{generate_synthetic, DatasetSpec, Split};
use atinet::models::{Model, ModelConfig, ModelKind};
use atinet::trainer::{TrainConfig, Trainer};

fn main() -> atinet::Result<()> {
    let spec = DatasetSpec::new("unused", Split::Train, 32, 32, 5);
    let data = generate_synthetic(4, &spec, 3, 0.1)?;
    let cfg = {
        let mut c = TrainConfig::with_epochs(6);
        c.lr = 2e-2;
        c.seed = 3;
        c
    };
    let model_cfg = ModelConfig::tiny(ModelKind::AtiNet, 5);
    let dir = std::env::temp_dir().join("atinet_checkpoint_demo");
    std::fs::create_dir_all(&dir).map_err(|e| atinet::Error::io(&dir, e))?;

    let mut full = Trainer::new(Model::build(&model_cfg, 3)?, cfg.clone())?;
    full.train(&data, None)?;

    let mut first = Trainer::new(Model::build(&model_cfg, 3)?, cfg)?;
    for _ in 0..2 {
        first.run_epoch(&data, None)?;
    }
    let path = dir.join("epoch_2.ckpt");
    first.save_checkpoint(&path)?;
    println!(
        "checkpoint: {} bytes at {}",
        std::fs::metadata(&path).map_or(0, |m| m.len()),
        path.display()
    );

    let mut resumed = Trainer::from_checkpoint(checkpoint::load(&path, Some(&model_cfg))?)?;
    resumed.train(&data, None)?;
    println!(
        "resumed run log equals uninterrupted: {}",
        resumed.log.to_csv() == full.log.to_csv()
    );
    Ok(())
}
