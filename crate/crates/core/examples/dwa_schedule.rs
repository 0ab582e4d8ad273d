//! Shows how Dynamic Weight Averaging reacts to per-task loss trends.

use atinet::objectives::{dwa_weights, DwaState, DEFAULT_TEMPERATURE};

fn main() -> atinet::Result<()> {
    let w = [0.5, 1.0, 0.5];
    println!("w = {w:?}, T = 2 -> lambda = {:.4?}", dwa_weights(&w, 2.0));

    // Segmentation improves fast, depth stalls, normals improve slowly.
    let mut dwa = DwaState::new(3, DEFAULT_TEMPERATURE)?;
    let mut losses = [2.0f64, 1.5, 0.5];
    println!("epoch  lambda used (seg, depth, normals)  epoch losses");
    for epoch in 1..=8 {
        let used = dwa.lambda.clone();
        println!(
            "{epoch:>5}  {:>8.4} {:>8.4} {:>8.4}           {:.3?}",
            used[0], used[1], used[2], losses
        );
        dwa.update(&losses)?;
        losses = [losses[0] * 0.7, losses[1] * 0.99, losses[2] * 0.9];
    }
    Ok(())
}
