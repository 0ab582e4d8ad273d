//! Flat `key = value` experiment configuration.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! A file may start from a preset with `preset = tiny`. Unknown keys are
//! rejected. [`ExperimentConfig::to_text`] writes every key, so a resolved
//! configuration can be read back unchanged.
//!
//! | key | value |
//! |-----|-------|
//! | `model` | `atinet`, `mtan`, `split`, `padnet`, `one_task:<task>` |
//! | `distill_mode` | `additive_gate`, `gated_message` |
//! | `stage_channels` | five comma-separated widths |
//! | `convs_per_stage` | five comma-separated counts |
//! | `upsample_mode` | `unpool`, `nearest` |
//! | `num_classes`, `height`, `width` | integers |
//! | `data`, `val_data`, `out` | paths (`val_data` may be empty) |
//! | `epochs`, `batch_size`, `seed`, `checkpoint_every` | integers |
//! | `lr`, `lr_decay_factor`, `temperature` | floats |
//! | `lr_decay_epoch`, `distill_activation_epoch` | integer or `auto` (half of `epochs`) |
//! | `weighting` | `dwa`, `equal` |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::{BackboneConfig, UpsampleMode, NUM_STAGES};
use crate::datamodel::{DatasetSpec, Split};
use crate::distillation::DistillMode;
use crate::error::{invalid, Error, Result};
use crate::models::{ModelConfig, ModelKind};
use crate::objectives::{Weighting, DEFAULT_TEMPERATURE};
use crate::trainer::TrainConfig;

pub const PRESETS: [&str; 2] = ["nyuv2_default", "tiny"];

/// File name of the resolved configuration written next to run outputs.
pub const RESOLVED_CONFIG_FILE: &str = "config.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    pub distill_mode: DistillMode,
    pub backbone: BackboneConfig,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub data: PathBuf,
    pub val_data: Option<PathBuf>,
    pub out: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_epoch: Option<usize>,
    pub distill_activation_epoch: Option<usize>,
    pub weighting: Weighting,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl ExperimentConfig {
    /// Full-size NYUv2 setup: 200 epochs, batch 2, lr 1e-4 halved at epoch 100.
    pub fn nyuv2_default() -> Self {
        Self {
            model: ModelKind::AtiNet,
            distill_mode: DistillMode::default(),
            backbone: BackboneConfig::default(),
            num_classes: 13,
            height: 288,
            width: 384,
            data: PathBuf::from("data/nyuv2/train"),
            val_data: Some(PathBuf::from("data/nyuv2/val")),
            out: PathBuf::from("runs/nyuv2"),
            epochs: 200,
            batch_size: 2,
            lr: 1e-4,
            lr_decay_factor: 0.5,
            lr_decay_epoch: None,
            distill_activation_epoch: None,
            weighting: Weighting::default(),
            seed: 0,
            checkpoint_every: 10,
        }
    }

    /// Desk-scale setup on 32×32 synthetic scenes.
    pub fn tiny() -> Self {
        Self {
            backbone: BackboneConfig::tiny(),
            num_classes: 5,
            height: 32,
            width: 32,
            data: PathBuf::from("data/tiny"),
            val_data: None,
            out: PathBuf::from("runs/tiny"),
            epochs: 300,
            lr: 2e-2,
            checkpoint_every: 0,
            ..Self::nyuv2_default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "nyuv2_default" => Ok(Self::nyuv2_default()),
            "tiny" => Ok(Self::tiny()),
            _ => Err(invalid!(
                "unknown preset {name:?} (expected one of {})",
                PRESETS.join(", ")
            )),
        }
    }

    /// A preset name or the path of a config file.
    pub fn load(name_or_path: &str) -> Result<Self> {
        if PRESETS.contains(&name_or_path) {
            return Self::preset(name_or_path);
        }
        let path = Path::new(name_or_path);
        if !path.is_file() {
            return Err(Error::NotFound(format!(
                "config {name_or_path:?} is neither a preset ({}) nor a file",
                PRESETS.join(", ")
            )));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses a config file; it starts from `nyuv2_default` unless its first
    /// setting is `preset = <name>`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: Option<Self> = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| invalid!("line {}: expected key = value, got {raw:?}", no + 1))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "preset" {
                if cfg.is_some() {
                    return Err(invalid!(
                        "line {}: preset must come before other keys",
                        no + 1
                    ));
                }
                cfg = Some(Self::preset(value)?);
                continue;
            }
            cfg.get_or_insert_with(Self::nyuv2_default)
                .set(key, value)
                .map_err(|e| invalid!("line {}: {}", no + 1, strip_prefix(e)))?;
        }
        let cfg = cfg.unwrap_or_else(Self::nyuv2_default);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| invalid!("{key}: cannot parse {v:?}"))
        }
        fn list(key: &str, v: &str) -> Result<[usize; NUM_STAGES]> {
            let items: Vec<usize> = v
                .split(',')
                .map(|s| num(key, s.trim()))
                .collect::<Result<_>>()?;
            items.try_into().map_err(|_| {
                invalid!("{key}: expected {NUM_STAGES} comma-separated values, got {v:?}")
            })
        }
        fn auto(key: &str, v: &str) -> Result<Option<usize>> {
            if v == "auto" {
                Ok(None)
            } else {
                num(key, v).map(Some)
            }
        }
        match key {
            "model" => self.model = value.parse()?,
            "distill_mode" => self.distill_mode = value.parse()?,
            "stage_channels" => self.backbone.stage_channels = list(key, value)?,
            "convs_per_stage" => self.backbone.convs_per_stage = list(key, value)?,
            "upsample_mode" => {
                self.backbone.upsample_mode = match value {
                    "unpool" => UpsampleMode::UnpoolIndices,
                    "nearest" => UpsampleMode::Nearest,
                    _ => {
                        return Err(invalid!(
                            "upsample_mode: expected unpool or nearest, got {value:?}"
                        ))
                    }
                }
            }
            "num_classes" => self.num_classes = num(key, value)?,
            "height" => self.height = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "data" => self.data = PathBuf::from(value),
            "val_data" => self.val_data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = num(key, value)?,
            "lr_decay_epoch" => self.lr_decay_epoch = auto(key, value)?,
            "distill_activation_epoch" => self.distill_activation_epoch = auto(key, value)?,
            "weighting" => {
                let t = match self.weighting {
                    Weighting::Dwa { temperature } => temperature,
                    Weighting::Equal => DEFAULT_TEMPERATURE,
                };
                self.weighting = match value {
                    "dwa" => Weighting::Dwa { temperature: t },
                    "equal" => Weighting::Equal,
                    _ => return Err(invalid!("weighting: expected dwa or equal, got {value:?}")),
                }
            }
            "temperature" => {
                let t = num(key, value)?;
                if let Weighting::Dwa { temperature } = &mut self.weighting {
                    *temperature = t;
                }
            }
            "seed" => self.seed = num(key, value)?,
            "checkpoint_every" => self.checkpoint_every = num(key, value)?,
            _ => return Err(invalid!("unknown config key {key:?}")),
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| invalid!("override {o:?} is not key=value"))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::new(self.model, self.backbone.clone(), self.num_classes)
            .with_distill_mode(self.distill_mode)
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = TrainConfig::with_epochs(self.epochs);
        t.batch_size = self.batch_size;
        t.lr = self.lr;
        t.lr_decay_factor = self.lr_decay_factor;
        if let Some(e) = self.lr_decay_epoch {
            t.lr_decay_epoch = e;
        }
        if let Some(e) = self.distill_activation_epoch {
            t.distill_activation_epoch = e;
        }
        t.weighting = self.weighting;
        t.seed = self.seed;
        t.checkpoint_every = self.checkpoint_every;
        t
    }

    pub fn dataset_spec(&self, root: &Path, split: Split) -> DatasetSpec {
        DatasetSpec::new(root, split, self.height, self.width, self.num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train_config().validate()?;
        self.dataset_spec(&self.data, Split::Train).validate()?;
        if !self.height.is_multiple_of(32) || !self.width.is_multiple_of(32) {
            return Err(invalid!(
                "height and width must be multiples of 32, got {}x{}",
                self.height,
                self.width
            ));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let auto = |v: Option<usize>| v.map_or("auto".to_string(), |e| e.to_string());
        let (weighting, temperature) = match self.weighting {
            Weighting::Dwa { temperature } => ("dwa", temperature),
            Weighting::Equal => ("equal", DEFAULT_TEMPERATURE),
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = if v.is_empty() {
                writeln!(s, "{k} =")
            } else {
                writeln!(s, "{k} = {v}")
            };
        };
        kv("model", self.model.to_string());
        kv("distill_mode", self.distill_mode.to_string());
        kv("stage_channels", join(&self.backbone.stage_channels));
        kv("convs_per_stage", join(&self.backbone.convs_per_stage));
        kv(
            "upsample_mode",
            match self.backbone.upsample_mode {
                UpsampleMode::UnpoolIndices => "unpool",
                UpsampleMode::Nearest => "nearest",
            }
            .into(),
        );
        kv("num_classes", self.num_classes.to_string());
        kv("height", self.height.to_string());
        kv("width", self.width.to_string());
        kv("data", self.data.display().to_string());
        kv(
            "val_data",
            self.val_data
                .as_ref()
                .map_or(String::new(), |p| p.display().to_string()),
        );
        kv("out", self.out.display().to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", self.lr.to_string());
        kv("lr_decay_factor", self.lr_decay_factor.to_string());
        kv("lr_decay_epoch", auto(self.lr_decay_epoch));
        kv(
            "distill_activation_epoch",
            auto(self.distill_activation_epoch),
        );
        kv("weighting", weighting.into());
        kv("temperature", temperature.to_string());
        kv("seed", self.seed.to_string());
        kv("checkpoint_every", self.checkpoint_every.to_string());
        s
    }
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::InvalidArgument(m) => m,
        other => other.to_string(),
    }
}
