//! Run configuration as a flat `key = value` text file.
//!
//! Blank lines and lines starting with `#` are ignored. Values run to the end
//! of the line (no inline comments), so paths may contain `#`. Missing keys
//! take their defaults; unknown keys are rejected. `auto` selects a derived
//! default where one exists.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `run_id` | `run` | label used in file names and CSV rows |
//! | `model` | `mlp` | `mlp` or `cnn` (cnn needs IDX images) |
//! | `widths` | `64,64,64` | hidden widths / channel counts |
//! | `dataset` | `synth` | `synth` or `idx` |
//! | `classes` | `4` | number of classes |
//! | `dims` | `16` | synthetic feature dimension |
//! | `per_class` | `500` | synthetic training examples per class |
//! | `eval_per_class` | `500` | synthetic evaluation examples per class |
//! | `class_sep` | `2.5` | distance of synthetic centroids from the origin |
//! | `data_seed` | `0` | synthetic data seed, independent of `seed` |
//! | `train_images`, `train_labels`, `eval_images`, `eval_labels` | empty | IDX paths |
//! | `train_limit`, `eval_limit` | `10000`, `2000` | IDX example caps |
//! | `epochs` | `20` | training epochs |
//! | `sgd_batch` | `64` | SGD batch G |
//! | `microbatch` | `2` | normalization microbatch B (divides G) |
//! | `base_lr` | `auto` | `auto` = 0.05·G/128; cosine decay to zero |
//! | `momentum` | `0.9` | SGD momentum |
//! | `ema_decay` | `0.99` | EMA decay of the running moments |
//! | `eps` | `1e-5` | variance epsilon |
//! | `en_enabled` | `true` | online estimation of (α̂, β̂) |
//! | `en_init` | `auto` | `auto` = 1/B |
//! | `en_lr` | `0.01` | (α̂, β̂) learning rate, cosine decay |
//! | `en_momentum` | `0.9` | (α̂, β̂) momentum |
//! | `en_projection` | `clamp` | projection onto [0, 1]; only `clamp` exists |
//! | `offline_steps` | `auto` | `auto` = min(one epoch, 2000) |
//! | `seed` | `0` | model initialization and batch order |
//! | `output_dir` | `out` | artifact directory |

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use evalnorm_core::estimator::EnSettings;
use evalnorm_core::model::{ModelKind, NormSettings};
use evalnorm_core::train::TrainSettings;

use crate::error::{read_file, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Synth,
    Idx,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub run_id: String,
    pub model: ModelKind,
    pub widths: Vec<usize>,
    pub dataset: DatasetKind,
    pub classes: usize,
    pub dims: usize,
    pub per_class: usize,
    pub eval_per_class: usize,
    pub class_sep: f64,
    pub data_seed: u64,
    pub train_images: String,
    pub train_labels: String,
    pub eval_images: String,
    pub eval_labels: String,
    pub train_limit: usize,
    pub eval_limit: usize,
    pub epochs: usize,
    pub sgd_batch: usize,
    pub microbatch: usize,
    pub base_lr: Option<f64>,
    pub momentum: f64,
    pub ema_decay: f64,
    pub eps: f64,
    pub en_enabled: bool,
    pub en_init: Option<f64>,
    pub en_lr: f64,
    pub en_momentum: f64,
    pub offline_steps: Option<usize>,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_id: "run".into(),
            model: ModelKind::Mlp,
            widths: vec![64, 64, 64],
            dataset: DatasetKind::Synth,
            classes: 4,
            dims: 16,
            per_class: 500,
            eval_per_class: 500,
            class_sep: 2.5,
            data_seed: 0,
            train_images: String::new(),
            train_labels: String::new(),
            eval_images: String::new(),
            eval_labels: String::new(),
            train_limit: 10_000,
            eval_limit: 2_000,
            epochs: 20,
            sgd_batch: 64,
            microbatch: 2,
            base_lr: None,
            momentum: 0.9,
            ema_decay: 0.99,
            eps: 1e-5,
            en_enabled: true,
            en_init: None,
            en_lr: 0.01,
            en_momentum: 0.9,
            offline_steps: None,
            seed: 0,
            output_dir: PathBuf::from("out"),
        }
    }
}

pub const KEYS: &[&str] = &[
    "run_id",
    "model",
    "widths",
    "dataset",
    "classes",
    "dims",
    "per_class",
    "eval_per_class",
    "class_sep",
    "data_seed",
    "train_images",
    "train_labels",
    "eval_images",
    "eval_labels",
    "train_limit",
    "eval_limit",
    "epochs",
    "sgd_batch",
    "microbatch",
    "base_lr",
    "momentum",
    "ema_decay",
    "eps",
    "en_enabled",
    "en_init",
    "en_lr",
    "en_momentum",
    "en_projection",
    "offline_steps",
    "seed",
    "output_dir",
];

fn num<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("invalid value {v:?} for {key}"))
}

fn auto<T: FromStr>(key: &str, v: &str) -> std::result::Result<Option<T>, String> {
    if v == "auto" {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn show_auto<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), |x| x.to_string())
}

impl RunConfig {
    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let v = value.trim();
        match key {
            "run_id" => {
                if v.is_empty() || v.contains(|c: char| c == ',' || c == '/' || c.is_whitespace()) {
                    return Err(format!("run_id {v:?} must be non-empty without ',', '/' or spaces"));
                }
                self.run_id = v.into();
            }
            "model" => {
                self.model = match v {
                    "mlp" => ModelKind::Mlp,
                    "cnn" => ModelKind::SmallCnn,
                    _ => return Err(format!("unknown model {v:?}")),
                }
            }
            "widths" => {
                self.widths = v
                    .split(',')
                    .map(|w| num(key, w.trim()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "dataset" => {
                self.dataset = match v {
                    "synth" => DatasetKind::Synth,
                    "idx" => DatasetKind::Idx,
                    _ => return Err(format!("unknown dataset {v:?}")),
                }
            }
            "classes" => self.classes = num(key, v)?,
            "dims" => self.dims = num(key, v)?,
            "per_class" => self.per_class = num(key, v)?,
            "eval_per_class" => self.eval_per_class = num(key, v)?,
            "class_sep" => self.class_sep = num(key, v)?,
            "data_seed" => self.data_seed = num(key, v)?,
            "train_images" => self.train_images = v.into(),
            "train_labels" => self.train_labels = v.into(),
            "eval_images" => self.eval_images = v.into(),
            "eval_labels" => self.eval_labels = v.into(),
            "train_limit" => self.train_limit = num(key, v)?,
            "eval_limit" => self.eval_limit = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "sgd_batch" => self.sgd_batch = num(key, v)?,
            "microbatch" => self.microbatch = num(key, v)?,
            "base_lr" => self.base_lr = auto(key, v)?,
            "momentum" => self.momentum = num(key, v)?,
            "ema_decay" => self.ema_decay = num(key, v)?,
            "eps" => self.eps = num(key, v)?,
            "en_enabled" => self.en_enabled = num(key, v)?,
            "en_init" => self.en_init = auto(key, v)?,
            "en_lr" => self.en_lr = num(key, v)?,
            "en_momentum" => self.en_momentum = num(key, v)?,
            "en_projection" => {
                if v != "clamp" {
                    return Err(format!("unknown projection {v:?}"));
                }
            }
            "offline_steps" => self.offline_steps = auto(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> std::result::Result<(), String> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| format!("override {kv:?} is not key=value"))?;
        self.set(k.trim(), v)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("config", i + 1, "expected key = value"))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::format("config", i + 1, format!("duplicate key {k:?}")));
            }
            cfg.set(k, v).map_err(|m| Error::format("config", i + 1, m))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|e| Error::format("config", e.utf8_error().valid_up_to(), "not UTF-8"))?;
        RunConfig::parse(&text)
    }

    /// Every key in [`KEYS`] order; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        let values: Vec<String> = vec![
            self.run_id.clone(),
            match self.model {
                ModelKind::Mlp => "mlp".into(),
                ModelKind::SmallCnn => "cnn".into(),
            },
            widths.join(","),
            match self.dataset {
                DatasetKind::Synth => "synth".into(),
                DatasetKind::Idx => "idx".into(),
            },
            self.classes.to_string(),
            self.dims.to_string(),
            self.per_class.to_string(),
            self.eval_per_class.to_string(),
            self.class_sep.to_string(),
            self.data_seed.to_string(),
            self.train_images.clone(),
            self.train_labels.clone(),
            self.eval_images.clone(),
            self.eval_labels.clone(),
            self.train_limit.to_string(),
            self.eval_limit.to_string(),
            self.epochs.to_string(),
            self.sgd_batch.to_string(),
            self.microbatch.to_string(),
            show_auto(&self.base_lr),
            self.momentum.to_string(),
            self.ema_decay.to_string(),
            self.eps.to_string(),
            self.en_enabled.to_string(),
            show_auto(&self.en_init),
            self.en_lr.to_string(),
            self.en_momentum.to_string(),
            "clamp".into(),
            show_auto(&self.offline_steps),
            self.seed.to_string(),
            self.output_dir.display().to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad(format!("widths {:?} must be non-empty and positive", self.widths));
        }
        if self.classes == 0 || self.epochs == 0 || self.sgd_batch == 0 || self.microbatch == 0 {
            return bad("classes, epochs and batch sizes must be positive".into());
        }
        if !self.sgd_batch.is_multiple_of(self.microbatch) {
            return bad(format!(
                "microbatch {} must divide sgd_batch {}",
                self.microbatch, self.sgd_batch
            ));
        }
        if self.dataset == DatasetKind::Synth && (self.dims == 0 || self.per_class == 0 || self.eval_per_class == 0) {
            return bad("synthetic dims and per-class counts must be positive".into());
        }
        if self.model == ModelKind::SmallCnn && self.dataset != DatasetKind::Idx {
            return bad("model cnn needs dataset idx".into());
        }
        if !(self.eps > 0.0) || !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad("eps must be positive and ema_decay in (0, 1)".into());
        }
        if let Some(lr) = self.base_lr {
            if !(lr > 0.0) {
                return bad(format!("base_lr {lr} must be positive"));
            }
        }
        if !(self.en_lr > 0.0) {
            return bad(format!("en_lr {} must be positive", self.en_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.en_momentum) {
            return bad("momenta must be in [0, 1)".into());
        }
        if let Some(a) = self.en_init {
            if !(0.0..=1.0).contains(&a) {
                return bad(format!("en_init {a} outside [0, 1]"));
            }
        }
        if self.offline_steps == Some(0) {
            return bad("offline_steps must be >= 1".into());
        }
        Ok(())
    }

    pub fn base_lr(&self) -> f64 {
        self.base_lr
            .unwrap_or(0.05 * self.sgd_batch as f64 / 128.0)
    }

    pub fn norm_settings(&self) -> NormSettings {
        NormSettings {
            eps: self.eps,
            ema_decay: self.ema_decay,
        }
    }

    pub fn en_settings(&self) -> EnSettings {
        EnSettings {
            lr: self.en_lr,
            momentum: self.en_momentum,
            init: self.en_init,
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            epochs: self.epochs,
            sgd_batch: self.sgd_batch,
            microbatch: self.microbatch,
            base_lr: self.base_lr(),
            momentum: self.momentum,
            en_enabled: self.en_enabled,
            en: self.en_settings(),
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.class_sep = 0.1 + 0.2;
        c.base_lr = Some(1e-3 / 3.0);
        c.train_images = "data/a#b.idx".into();
        c.offline_steps = Some(17);
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn comments_defaults_and_line_numbers() {
        let c = RunConfig::parse("# comment\n\nmicrobatch = 4\n").unwrap();
        assert_eq!(c.microbatch, 4);
        assert_eq!(c.base_lr(), 0.025);
        match RunConfig::parse("epochs = 2\nbogus = 1\n") {
            Err(Error::Format { offset: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::parse("seed = 1\nseed = 2\n").is_err());
        assert!(RunConfig::parse("microbatch = 3\n").is_err());
    }

    #[test]
    fn overrides() {
        let mut c = RunConfig::default();
        c.apply_override("widths=8,8").unwrap();
        c.apply_override("en_init = 0.25").unwrap();
        assert_eq!(c.widths, vec![8, 8]);
        assert_eq!(c.en_init, Some(0.25));
        assert!(c.apply_override("widths").is_err());
        assert!(c.apply_override("nope=1").is_err());
        assert!(c.apply_override("en_projection=sigmoid").is_err());
    }
}
