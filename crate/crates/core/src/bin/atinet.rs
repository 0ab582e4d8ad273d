//! `atinet` command-line tool: dataset synthesis, training, evaluation and
//! parameter audits.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use atinet::checkpoint;
use atinet::config::{ExperimentConfig, RESOLVED_CONFIG_FILE};
use atinet::datamodel::{
    generate_synthetic, open_dataset, write_dataset, DatasetSpec, Sample, Split,
};
use atinet::distillation::DistillMode;
use atinet::metrics::CSV_HEADER;
use atinet::models::{Model, ModelKind};
use atinet::report::{write_loss_plot, ParamAudit, LOSS_PLOT};
use atinet::trainer::{evaluate, EpochRecord, Trainer};
use atinet::Error;

const THREADS_ENV: &str = "ATINET_NUM_THREADS";

#[derive(Parser)]
#[command(
    name = "atinet",
    version,
    about = "Multi-task dense prediction with latent task distillation"
)]
#[command(
    after_help = "Environment:\n  ATINET_NUM_THREADS  caps the number of compute threads\n\n\
Exit codes: 0 success, 1 runtime failure, 2 usage error"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a deterministic synthetic dataset.
    Synth(SynthArgs),
    /// Train a model and write run log, checkpoints and a loss plot.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print one CSV row of metrics.
    Eval(EvalArgs),
    /// Print the parameter audit of every model variant.
    Params(ParamsArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of samples.
    #[arg(long)]
    n: usize,
    /// Image size as HEIGHTxWIDTH; both multiples of 32.
    #[arg(long, default_value = "32x32", value_parser = parse_hw)]
    hw: (usize, usize),
    /// Number of semantic classes.
    #[arg(long, default_value_t = 5)]
    classes: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of pixels with missing depth and normals, in [0, 1).
    #[arg(long, default_value_t = 0.0)]
    missing: f64,
    /// Split recorded in the manifest (train or val).
    #[arg(long, default_value = "train")]
    split: Split,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Preset name (nyuv2_default, tiny) or path of a key = value config file.
    #[arg(long, default_value = "tiny")]
    config: String,
    /// Model variant: atinet, mtan, split, padnet or one_task:<task>.
    #[arg(long)]
    model: Option<ModelKind>,
    /// Training dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Validation dataset directory, evaluated after every epoch.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Total number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Batch size.
    #[arg(long)]
    batch: Option<usize>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Seed for initialization and shuffling.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Distillation variant: additive_gate or gated_message.
    #[arg(long)]
    distill_mode: Option<DistillMode>,
    /// Write a checkpoint every this many epochs (0 disables).
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Further config overrides as key=value; applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Resume from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Evaluation batch size.
    #[arg(long, default_value_t = 2)]
    batch: usize,
    /// Also write the header and row to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ParamsArgs {
    /// Preset name (nyuv2_default, tiny) or path of a key = value config file.
    #[arg(long, default_value = "nyuv2_default")]
    config: String,
    /// Further config overrides as key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

fn parse_hw(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HEIGHTxWIDTH, got {s:?}"))?;
    let num = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| format!("bad size {v:?} in {s:?}"))
    };
    Ok((num(h)?, num(w)?))
}

/// A failed command and the exit code it maps to.
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl Failure {
    /// Bad arguments and missing inputs are usage errors; the rest are
    /// runtime failures.
    fn setup(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::NotFound(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn configure_threads() -> CmdResult {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Failure::Usage(format!(
            "{THREADS_ENV} must be a positive integer, got {v:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("{THREADS_ENV}: {e}")))
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    if !(0.0..1.0).contains(&a.missing) {
        return Err(Failure::Usage(format!(
            "--missing must be in [0, 1), got {}",
            a.missing
        )));
    }
    let spec = DatasetSpec::new(&a.out, a.split, a.hw.0, a.hw.1, a.classes);
    spec.validate()
        .map_err(|e| Failure::Usage(format!("--hw/--classes: {e}")))?;
    let samples = generate_synthetic(a.n, &spec, a.seed, a.missing).map_err(Failure::setup)?;
    let m = write_dataset(&spec, &samples)?;
    println!(
        "wrote {} samples ({}x{}, {} classes, split {}) to {}",
        m.num_samples,
        m.height,
        m.width,
        m.num_classes,
        m.split.name(),
        a.out.display()
    );
    Ok(())
}

fn load_split(
    root: &Path,
    cfg: &ExperimentConfig,
    what: &str,
) -> std::result::Result<Vec<Sample>, Failure> {
    let (spec, samples) = open_dataset(root).map_err(|e| match e {
        Error::NotFound(m) => Failure::Usage(format!("{what}: {m}")),
        other => Failure::Runtime(other),
    })?;
    if (spec.image_height, spec.image_width, spec.num_classes)
        != (cfg.height, cfg.width, cfg.num_classes)
    {
        return Err(Failure::Usage(format!(
            "{what} {} is {}x{} with {} classes, expected {}x{} with {}",
            root.display(),
            spec.image_height,
            spec.image_width,
            spec.num_classes,
            cfg.height,
            cfg.width,
            cfg.num_classes
        )));
    }
    Ok(samples)
}

fn print_epoch(r: &EpochRecord) {
    let mut line = format!(
        "epoch {:>4}  lr {:.2e}  distill {}  loss {:+.5}  [seg {:.4} depth {:.4} normals {:+.4}]",
        r.epoch,
        r.lr,
        r.distillation_active as u8,
        r.total_loss,
        r.train_loss.0[0],
        r.train_loss.0[1],
        r.train_loss.0[2]
    );
    if let Some(v) = &r.val {
        line.push_str(&format!(
            "  val miou {:.4} pix {:.4} abs {:.4} angle {:.2}",
            v.miou, v.pix_acc, v.abs_err, v.angle_mean
        ));
    }
    println!("{line}");
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut cfg = ExperimentConfig::load(&a.config).map_err(Failure::setup)?;
    let mut flags: Vec<String> = Vec::new();
    let mut flag = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            flags.push(format!("{k}={v}"));
        }
    };
    flag("model", a.model.map(|m| m.to_string()));
    flag("data", a.data.map(|p| p.display().to_string()));
    flag("val_data", a.val.map(|p| p.display().to_string()));
    flag("epochs", a.epochs.map(|v| v.to_string()));
    flag("batch_size", a.batch.map(|v| v.to_string()));
    flag("lr", a.lr.map(|v| v.to_string()));
    flag("seed", a.seed.map(|v| v.to_string()));
    flag("out", a.out.map(|p| p.display().to_string()));
    flag("distill_mode", a.distill_mode.map(|m| m.to_string()));
    flag(
        "checkpoint_every",
        a.checkpoint_every.map(|v| v.to_string()),
    );
    cfg.apply_overrides(&flags).map_err(Failure::setup)?;
    cfg.apply_overrides(&a.overrides).map_err(Failure::setup)?;

    // Image size and class count follow the training data.
    let manifest = atinet::datamodel::read_manifest(&cfg.data).map_err(|e| match e {
        Error::NotFound(m) => Failure::Usage(format!("--data: {m}")),
        other => Failure::Runtime(other),
    })?;
    cfg.height = manifest.height;
    cfg.width = manifest.width;
    cfg.num_classes = manifest.num_classes;
    cfg.validate().map_err(Failure::setup)?;

    let train = load_split(&cfg.data.clone(), &cfg, "--data")?;
    let val = match cfg.val_data.clone() {
        Some(p) => Some(load_split(&p, &cfg, "--val")?),
        None => None,
    };

    let out = cfg.out.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let resolved = out.join(RESOLVED_CONFIG_FILE);
    fs::write(&resolved, cfg.to_text()).map_err(|e| Error::io(&resolved, e))?;

    let model_cfg = cfg.model_config();
    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = checkpoint::load(path, Some(&model_cfg)).map_err(Failure::setup)?;
            Trainer::from_checkpoint(ck).map_err(Failure::setup)?
        }
        None => {
            let model = Model::build(&model_cfg, cfg.seed).map_err(Failure::setup)?;
            Trainer::new(model, cfg.train_config()).map_err(Failure::setup)?
        }
    }
    .with_out_dir(&out);

    let quiet = a.quiet;
    let log = trainer.train_with(&train, val.as_deref(), |r| {
        if !quiet {
            print_epoch(r);
        }
    })?;
    write_loss_plot(log, &out.join(LOSS_PLOT))?;
    println!("run written to {}", out.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    if !a.checkpoint.is_file() {
        return Err(Failure::Usage(format!(
            "--checkpoint {} does not exist",
            a.checkpoint.display()
        )));
    }
    if a.batch == 0 {
        return Err(Failure::Usage("--batch must be at least 1".into()));
    }
    let ck = checkpoint::load(&a.checkpoint, None).map_err(Failure::setup)?;
    let (spec, samples) = open_dataset(&a.data).map_err(|e| match e {
        Error::NotFound(m) => Failure::Usage(format!("--data: {m}")),
        other => Failure::Runtime(other),
    })?;
    if spec.num_classes != ck.model.config.num_classes {
        return Err(Failure::Usage(format!(
            "--data has {} classes, the checkpoint model {}",
            spec.num_classes, ck.model.config.num_classes
        )));
    }
    let distill = ck.model.kind() == ModelKind::AtiNet
        && ck.epoch >= ck.train_config.distill_activation_epoch;
    let report = evaluate(&ck.model, &samples, a.batch, distill).map_err(Failure::setup)?;
    let text = format!("{CSV_HEADER}\n{}\n", report.csv_row());
    print!("{text}");
    if let Some(path) = &a.out {
        fs::write(path, &text).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn cmd_params(a: ParamsArgs) -> CmdResult {
    let mut cfg = ExperimentConfig::load(&a.config).map_err(Failure::setup)?;
    cfg.apply_overrides(&a.overrides).map_err(Failure::setup)?;
    cfg.validate().map_err(Failure::setup)?;
    let audit = ParamAudit::run(&cfg.backbone, cfg.num_classes, cfg.distill_mode)?;
    print!("{}", audit.to_table());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Params(a) => cmd_params(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
