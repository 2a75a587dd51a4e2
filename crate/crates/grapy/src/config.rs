//! Run settings: `key = value` files overridden by command-line flags.

use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

use crate::gpm::{GpmConfig, Pooling};
use crate::model::{ModelConfig, TrainConfig};
use crate::mutual::MlTrainConfig;
use crate::synth::SceneSpec;
use crate::taxonomy::Level;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown setting `{0}`")]
    UnknownKey(String),
    #[error("`{key}`: {msg}")]
    Value { key: String, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Kv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub datasets: Vec<String>,
    pub taxonomy: Option<String>,
    pub split: String,

    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub main_epochs: usize,
    pub finetune_epochs: usize,
    pub decay_epoch: Option<usize>,
    pub decay_factor: f64,
    pub clip_norm: Option<f64>,
    pub steps_per_epoch: Option<usize>,

    pub lambda: f64,
    pub hidden: Vec<usize>,
    pub channels: usize,
    pub gpm: bool,
    pub gcr_iterations: usize,
    pub gcr_fresh_weights: bool,
    pub pooling: Pooling,
    pub levels: Vec<Level>,
    pub share_backbone: bool,
    pub gt_masks: bool,
    pub precision: Precision,

    pub overfit: Option<usize>,
    pub finetune: Option<String>,
    pub accumulate: bool,
    pub audit_sharing: bool,
    pub eval_workers: usize,
    pub exclude_background: bool,
    pub format: ReportFormat,
    pub limit: Option<usize>,

    pub image_size: usize,
    pub noise_sigma: f64,
    pub palette_jitter: f64,
    /// Per-dataset `(name, train, test)` sizes for data generation.
    pub sizes: Vec<(String, usize, usize)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let scene = SceneSpec::default();
        Self {
            seed: 0,
            data: None,
            out: None,
            checkpoint: None,
            datasets: Vec::new(),
            taxonomy: None,
            split: "test".into(),
            lr: train.lr,
            momentum: train.momentum,
            batch_size: train.batch_size,
            pretrain_epochs: train.pretrain_epochs,
            main_epochs: train.main_epochs,
            finetune_epochs: MlTrainConfig::default().finetune_epochs,
            decay_epoch: None,
            decay_factor: train.decay_factor,
            clip_norm: train.clip_norm,
            steps_per_epoch: None,
            lambda: model.lambda,
            hidden: model.hidden,
            channels: model.gpm.channels,
            gpm: true,
            gcr_iterations: model.gpm.iterations,
            gcr_fresh_weights: false,
            pooling: model.gpm.pooling,
            levels: model.gpm.levels,
            share_backbone: true,
            gt_masks: false,
            precision: Precision::F64,
            overfit: None,
            finetune: None,
            accumulate: false,
            audit_sharing: false,
            eval_workers: 1,
            exclude_background: false,
            format: ReportFormat::Table,
            limit: None,
            image_size: scene.height,
            noise_sigma: scene.noise_sigma,
            palette_jitter: scene.palette_jitter,
            sizes: vec![
                ("A".into(), 200, 50),
                ("B".into(), 600, 100),
                ("C".into(), 400, 100),
            ],
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "data",
    "out",
    "checkpoint",
    "datasets",
    "taxonomy",
    "split",
    "lr",
    "momentum",
    "batch_size",
    "pretrain_epochs",
    "main_epochs",
    "finetune_epochs",
    "decay_epoch",
    "decay_factor",
    "clip_norm",
    "steps_per_epoch",
    "lambda",
    "hidden",
    "channels",
    "gpm",
    "gcr_iterations",
    "gcr_fresh_weights",
    "pooling",
    "levels",
    "share_backbone",
    "gt_masks",
    "precision",
    "overfit",
    "finetune",
    "accumulate",
    "audit_sharing",
    "eval_workers",
    "exclude_background",
    "format",
    "limit",
    "image_size",
    "noise_sigma",
    "palette_jitter",
    "sizes",
];

fn value_err(key: &str, msg: impl fmt::Display) -> ConfigError {
    ConfigError::Value {
        key: key.to_string(),
        msg: msg.to_string(),
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(value_err(key, format!("expected a boolean, got `{v}`"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse()
        .map_err(|_| value_err(key, format!("`{v}` is not a valid number")))
}

fn in_range<T: PartialOrd + fmt::Display + Copy>(key: &str, v: T, lo: T, hi: T) -> Result<T, ConfigError> {
    if v >= lo && v <= hi {
        Ok(v)
    } else {
        Err(value_err(key, format!("{v} is outside [{lo}, {hi}]")))
    }
}

fn real(key: &str, v: &str, lo: f64, hi: f64) -> Result<f64, ConfigError> {
    in_range(key, parse_num::<f64>(key, v)?, lo, hi)
}

fn count(key: &str, v: &str, lo: usize, hi: usize) -> Result<usize, ConfigError> {
    in_range(key, parse_num::<usize>(key, v)?, lo, hi)
}

fn optional(v: &str) -> Option<&str> {
    (!v.is_empty() && v != "none").then_some(v)
}

fn list(v: &str) -> Vec<&str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
}

impl RunConfig {
    /// Applies one setting, validating its range.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "data" => self.data = optional(v).map(PathBuf::from),
            "out" => self.out = optional(v).map(PathBuf::from),
            "checkpoint" => self.checkpoint = optional(v).map(PathBuf::from),
            "datasets" => self.datasets = list(v).into_iter().map(str::to_string).collect(),
            "taxonomy" => self.taxonomy = optional(v).map(str::to_string),
            "split" => {
                if v != "train" && v != "test" {
                    return Err(value_err(key, "expected `train` or `test`"));
                }
                self.split = v.to_string();
            }
            "lr" => self.lr = real(key, v, 0.0, 10.0)?,
            "momentum" => {
                self.momentum = real(key, v, 0.0, 1.0)?;
                if self.momentum >= 1.0 {
                    return Err(value_err(key, "must be below 1"));
                }
            }
            "batch_size" => self.batch_size = count(key, v, 1, 4096)?,
            "pretrain_epochs" => self.pretrain_epochs = count(key, v, 0, 100_000)?,
            "main_epochs" => self.main_epochs = count(key, v, 0, 100_000)?,
            "finetune_epochs" => self.finetune_epochs = count(key, v, 0, 100_000)?,
            "decay_epoch" => {
                self.decay_epoch = optional(v).map(|s| count(key, s, 0, 100_000)).transpose()?
            }
            "clip_norm" => {
                let c = real(key, v, 0.0, 1e9)?;
                self.clip_norm = (c > 0.0).then_some(c);
            }
            "decay_factor" => {
                self.decay_factor = real(key, v, 0.0, 1.0)?;
                if self.decay_factor == 0.0 {
                    return Err(value_err(key, "must be positive"));
                }
            }
            "steps_per_epoch" => {
                self.steps_per_epoch = optional(v).map(|s| count(key, s, 1, 1_000_000)).transpose()?
            }
            "lambda" => self.lambda = real(key, v, 0.0, 1000.0)?,
            "hidden" => {
                self.hidden = list(v)
                    .into_iter()
                    .map(|s| count(key, s, 1, 1024))
                    .collect::<Result<_, _>>()?
            }
            "channels" => self.channels = count(key, v, 1, 1024)?,
            "gpm" => self.gpm = parse_bool(key, v)?,
            "gcr_iterations" => self.gcr_iterations = count(key, v, 1, 16)?,
            "gcr_fresh_weights" => self.gcr_fresh_weights = parse_bool(key, v)?,
            "pooling" => {
                self.pooling =
                    Pooling::parse(v).ok_or_else(|| value_err(key, "expected `average`, `max` or `both`"))?
            }
            "levels" => {
                let mut levels = list(v)
                    .into_iter()
                    .map(|s| {
                        count(key, s, 1, 3).map(|n| Level::from_number(n).expect("checked range"))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                levels.sort_by_key(|l| l.number());
                levels.dedup();
                if levels.is_empty() {
                    return Err(value_err(key, "at least one level is required"));
                }
                self.levels = levels;
            }
            "share_backbone" => self.share_backbone = parse_bool(key, v)?,
            "gt_masks" => self.gt_masks = parse_bool(key, v)?,
            "precision" => {
                self.precision = match v {
                    "f64" | "fixed" => Precision::F64,
                    _ => return Err(value_err(key, "only `f64` is supported")),
                }
            }
            "overfit" => self.overfit = optional(v).map(|s| count(key, s, 1, 1_000_000)).transpose()?,
            "finetune" => self.finetune = optional(v).map(str::to_string),
            "accumulate" => self.accumulate = parse_bool(key, v)?,
            "audit_sharing" => self.audit_sharing = parse_bool(key, v)?,
            "eval_workers" => self.eval_workers = count(key, v, 1, 256)?,
            "exclude_background" => self.exclude_background = parse_bool(key, v)?,
            "format" => {
                self.format = match v {
                    "table" => ReportFormat::Table,
                    "kv" => ReportFormat::Kv,
                    _ => return Err(value_err(key, "expected `table` or `kv`")),
                }
            }
            "limit" => self.limit = optional(v).map(|s| count(key, s, 1, usize::MAX)).transpose()?,
            "image_size" => self.image_size = count(key, v, 16, 1024)?,
            "noise_sigma" => self.noise_sigma = real(key, v, 0.0, 1.0)?,
            "palette_jitter" => self.palette_jitter = real(key, v, 0.0, 1.0)?,
            "sizes" => {
                // A=200/50,B=600/100
                let mut sizes = Vec::new();
                for item in list(v) {
                    let parsed = item.split_once('=').and_then(|(name, counts)| {
                        let (tr, te) = counts.split_once('/')?;
                        Some((name.to_string(), tr.parse().ok()?, te.parse().ok()?))
                    });
                    sizes.push(parsed.ok_or_else(|| value_err(key, format!("bad entry `{item}`, expected NAME=TRAIN/TEST")))?);
                }
                self.sizes = sizes;
            }
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies every `key = value` line of a config file. `#` starts a
    /// comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            in_channels: 3,
            hidden: self.hidden.clone(),
            kernel: 3,
            use_gpm: self.gpm,
            gpm: GpmConfig {
                channels: self.channels,
                iterations: self.gcr_iterations,
                fresh_weights: self.gcr_fresh_weights,
                pooling: self.pooling,
                levels: self.levels.clone(),
            },
            lambda: self.lambda,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            lr: self.lr,
            momentum: self.momentum,
            batch_size: self.batch_size,
            pretrain_epochs: self.pretrain_epochs,
            main_epochs: self.main_epochs,
            decay_epoch: self.decay_epoch,
            decay_factor: self.decay_factor,
            clip_norm: self.clip_norm,
            gt_masks: self.gt_masks,
        }
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            seed: self.seed,
            height: self.image_size,
            width: self.image_size,
            noise_sigma: self.noise_sigma,
            palette_jitter: self.palette_jitter,
            ..SceneSpec::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\nlr = 0.01\nhidden = 8, 8 \nlevels=3,1\n\npooling = max # inline\n")
            .unwrap();
        c.set("lr", "0.2").unwrap();
        assert_eq!(c.lr, 0.2);
        assert_eq!(c.hidden, [8, 8]);
        assert_eq!(c.levels, [Level::One, Level::Three]);
        assert_eq!(c.pooling, Pooling::Max);
    }

    #[test]
    fn rejects_unknown_and_out_of_range() {
        let mut c = RunConfig::default();
        assert_eq!(c.set("learning_rate", "1"), Err(ConfigError::UnknownKey("learning_rate".into())));
        assert!(c.set("momentum", "1.0").is_err());
        assert!(c.set("batch_size", "0").is_err());
        assert!(c.set("lambda", "-1").is_err());
        assert!(c.set("image_size", "8").is_err());
        assert!(c.set("precision", "f32").is_err());
        assert!(c.set("gt_masks", "maybe").is_err());
        assert_eq!(c.apply_text("lr 0.1"), Err(ConfigError::Syntax { line: 1 }));
    }

    #[test]
    fn every_key_is_settable() {
        for key in KEYS {
            let mut c = RunConfig::default();
            let err = c.set(key, "\u{0}");
            assert!(!matches!(err, Err(ConfigError::UnknownKey(_))), "{key}");
        }
    }

    #[test]
    fn sizes_parse() {
        let mut c = RunConfig::default();
        c.set("sizes", "A=8/4,B=2/2").unwrap();
        assert_eq!(c.sizes, [("A".to_string(), 8, 4), ("B".to_string(), 2, 2)]);
        assert!(c.set("sizes", "A=8").is_err());
    }
}
