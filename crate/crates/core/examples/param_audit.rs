//! Prints the parameter audit of every model variant for the full-size and
//! tiny backbones.

use atinet::backbone::BackboneConfig;
use atinet::distillation::DistillMode;
use atinet::report::ParamAudit;

fn main() -> atinet::Result<()> {
    for (name, backbone, classes) in [
        (
            "NYUv2 (13 classes, full SegNet)",
            BackboneConfig::default(),
            13,
        ),
        ("tiny (5 classes)", BackboneConfig::tiny(), 5),
    ] {
        for mode in [DistillMode::AdditiveGate, DistillMode::GatedMessage] {
            println!("{name}, atinet distillation {mode}:");
            print!("{}", ParamAudit::run(&backbone, classes, mode)?.to_table());
            println!();
        }
    }
    Ok(())
}
