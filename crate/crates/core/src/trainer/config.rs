//! Run configuration: presets plus a dotted-key TOML file with strict key checking.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use toml::Value;

use crate::alignment::FlowConfig;
use crate::error::{ensure, Error, Result};
use crate::losses::LossConfig;
use crate::networks::{Architecture, MacroChoice, Model, ModelConfig};
use crate::rainmodel::BankConfig;
use crate::searchspace::CellSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub channels: usize,
    pub cells: usize,
    pub gars: bool,
    pub genotype: CellSpec,
    pub align: MacroChoice,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    pub frames: usize,
    pub crop: usize,
    pub flips: bool,
    pub val_every: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RainSection {
    pub kernels_per_group: usize,
    pub short_size: usize,
    pub long_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub epochs: usize,
    pub batch: usize,
    pub warm_start_epochs: usize,
    pub arch_lr: f64,
    pub lr0: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub crop: usize,
    pub with_companion: bool,
    pub max_batches: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub max_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AasConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub max_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub model: ModelSection,
    pub data: DataSection,
    pub rain: RainSection,
    pub flow: FlowConfig,
    pub loss: LossConfig,
    pub search: SearchConfig,
    pub train: TrainConfig,
    pub aas: AasConfig,
}

/// A documented configuration key.
pub struct KeyDoc {
    pub key: &'static str,
    pub unit: &'static str,
    pub doc: &'static str,
}

const fn k(key: &'static str, unit: &'static str, doc: &'static str) -> KeyDoc {
    KeyDoc { key, unit, doc }
}

pub const KEYS: &[KeyDoc] = &[
    k("run.seed", "-", "seed for initialization, data order and augmentation"),
    k("model.channels", "channels", "feature width F of every branch, alignment and fusion layer"),
    k("model.cells", "count", "cells cascaded in each branch"),
    k("model.gars", "bool", "feed the dominant branch frames with auxiliary rain added"),
    k("model.genotype", "ops", "derived cell: `light`, `heavy` or four comma-separated op ids"),
    k("model.align", "ofm|tgm", "alignment module of the derived model"),
    k("data.frames", "frames", "temporal window size (3, 5 or 7)"),
    k("data.crop", "px", "square training crop"),
    k("data.flips", "bool", "random horizontal and vertical flips"),
    k("data.val_every", "sequences", "every n-th sequence is held out for architecture steps"),
    k("rain.kernels", "count", "streak kernels per group in the auxiliary rain bank"),
    k("rain.short_size", "px", "size of the short blurred kernels"),
    k("rain.long_size", "px", "size of the long sharp kernels"),
    k("flow.levels", "count", "pyramid levels of the flow estimator"),
    k("flow.iterations", "count", "refinement iterations per level"),
    k("flow.radius", "px", "half-size of the least-squares window"),
    k("flow.regularization", "-", "Tikhonov weight per window pixel"),
    k("loss.rho", "-", "weight of the mean absolute error"),
    k("loss.eta", "-", "weight of the architecture entropy term"),
    k("loss.ssim_window", "px", "Gaussian SSIM window size"),
    k("loss.ssim_sigma", "px", "Gaussian SSIM window std"),
    k("search.epochs", "epochs", "search epochs"),
    k("search.batch", "windows", "windows per step"),
    k("search.warm_start_epochs", "epochs", "epochs before architecture steps start"),
    k("search.arch_lr", "-", "SGD learning rate of the architecture logits"),
    k("search.lr0", "-", "initial weight learning rate"),
    k("search.lr_min", "-", "final weight learning rate"),
    k("search.momentum", "-", "SGD momentum of the weight steps"),
    k("search.crop", "px", "square crop used during search"),
    k("search.with_companion", "bool", "add the companion loss to the architecture objective"),
    k("search.max_batches", "batches", "cap on batches per epoch and split (0 = all)"),
    k("train.epochs", "epochs", "branch training epochs"),
    k("train.batch", "windows", "windows per step"),
    k("train.lr0", "-", "initial Adam learning rate"),
    k("train.lr_min", "-", "final Adam learning rate"),
    k("train.max_steps", "steps", "cap on total steps (0 = none)"),
    k("aas.epochs", "epochs", "fusion fine-tuning epochs"),
    k("aas.batch", "windows", "windows per step"),
    k("aas.lr", "-", "Adam learning rate of the fusion weights"),
    k("aas.max_steps", "steps", "cap on total steps (0 = none)"),
];

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    v.as_integer()
        .filter(|i| *i >= 0)
        .map(|i| i as usize)
        .ok_or_else(|| Error::Config(format!("`{key}` expects a nonnegative integer, got {v}")))
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    v.as_float()
        .or_else(|| v.as_integer().map(|i| i as f64))
        .ok_or_else(|| Error::Config(format!("`{key}` expects a number, got {v}")))
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool()
        .ok_or_else(|| Error::Config(format!("`{key}` expects true or false, got {v}")))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str()
        .ok_or_else(|| Error::Config(format!("`{key}` expects a string, got {v}")))
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out),
            _ => out.push((key, v.clone())),
        }
    }
}

impl Default for Config {
    fn default() -> Self {
        Config::light()
    }
}

impl Config {
    /// Full-scale settings with the light-rain genotype and flow alignment.
    pub fn light() -> Self {
        Config {
            seed: 0,
            model: ModelSection {
                channels: 32,
                cells: 4,
                gars: true,
                genotype: CellSpec::light(),
                align: MacroChoice::Ofm,
            },
            data: DataSection {
                frames: 5,
                crop: 240,
                flips: true,
                val_every: 4,
            },
            rain: RainSection {
                kernels_per_group: 3,
                short_size: 9,
                long_size: 15,
            },
            flow: FlowConfig::default(),
            loss: LossConfig::default(),
            search: SearchConfig {
                epochs: 80,
                batch: 4,
                warm_start_epochs: 30,
                arch_lr: 1e-4,
                lr0: 3e-4,
                lr_min: 1e-6,
                momentum: 0.9,
                crop: 64,
                with_companion: false,
                max_batches: 0,
            },
            train: TrainConfig {
                epochs: 160,
                batch: 4,
                lr0: 3e-4,
                lr_min: 1e-6,
                max_steps: 0,
            },
            aas: AasConfig {
                epochs: 50,
                batch: 4,
                lr: 1e-6,
                max_steps: 0,
            },
        }
    }

    /// Full-scale settings with the heavy-rain genotype and temporal grouping.
    pub fn heavy() -> Self {
        let mut c = Config::light();
        c.model.genotype = CellSpec::heavy();
        c.model.align = MacroChoice::Tgm;
        c
    }

    /// Desk-scale settings for 64x64 synthetic sequences.
    pub fn toy() -> Self {
        let mut c = Config::light();
        c.model.channels = 8;
        c.model.cells = 1;
        c.data.frames = 3;
        c.data.crop = 64;
        c.rain = RainSection {
            kernels_per_group: 2,
            short_size: 5,
            long_size: 9,
        };
        c.flow.levels = 2;
        c.flow.iterations = 3;
        c.search = SearchConfig {
            epochs: 20,
            batch: 4,
            warm_start_epochs: 5,
            arch_lr: 0.5,
            lr0: 0.02,
            lr_min: 1e-6,
            momentum: 0.9,
            crop: 32,
            with_companion: false,
            max_batches: 2,
        };
        c.train = TrainConfig {
            epochs: 40,
            batch: 4,
            lr0: 2e-3,
            lr_min: 1e-6,
            max_steps: 300,
        };
        c.aas = AasConfig {
            epochs: 3,
            batch: 4,
            lr: 1e-2,
            max_steps: 0,
        };
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "light" => Ok(Config::light()),
            "heavy" => Ok(Config::heavy()),
            "toy" => Ok(Config::toy()),
            _ => Err(Error::Argument(format!("unknown preset `{name}` (light, heavy, toy)"))),
        }
    }

    pub fn get(&self, key: &str) -> Result<Value> {
        let int = |v: usize| Value::Integer(v as i64);
        Ok(match key {
            "run.seed" => Value::Integer(self.seed as i64),
            "model.channels" => int(self.model.channels),
            "model.cells" => int(self.model.cells),
            "model.gars" => Value::Boolean(self.model.gars),
            "model.genotype" => Value::String(self.model.genotype.to_string()),
            "model.align" => Value::String(self.model.align.to_string()),
            "data.frames" => int(self.data.frames),
            "data.crop" => int(self.data.crop),
            "data.flips" => Value::Boolean(self.data.flips),
            "data.val_every" => int(self.data.val_every),
            "rain.kernels" => int(self.rain.kernels_per_group),
            "rain.short_size" => int(self.rain.short_size),
            "rain.long_size" => int(self.rain.long_size),
            "flow.levels" => int(self.flow.levels),
            "flow.iterations" => int(self.flow.iterations),
            "flow.radius" => int(self.flow.radius),
            "flow.regularization" => Value::Float(self.flow.regularization),
            "loss.rho" => Value::Float(self.loss.rho),
            "loss.eta" => Value::Float(self.loss.eta),
            "loss.ssim_window" => int(self.loss.window),
            "loss.ssim_sigma" => Value::Float(self.loss.sigma),
            "search.epochs" => int(self.search.epochs),
            "search.batch" => int(self.search.batch),
            "search.warm_start_epochs" => int(self.search.warm_start_epochs),
            "search.arch_lr" => Value::Float(self.search.arch_lr),
            "search.lr0" => Value::Float(self.search.lr0),
            "search.lr_min" => Value::Float(self.search.lr_min),
            "search.momentum" => Value::Float(self.search.momentum),
            "search.crop" => int(self.search.crop),
            "search.with_companion" => Value::Boolean(self.search.with_companion),
            "search.max_batches" => int(self.search.max_batches),
            "train.epochs" => int(self.train.epochs),
            "train.batch" => int(self.train.batch),
            "train.lr0" => Value::Float(self.train.lr0),
            "train.lr_min" => Value::Float(self.train.lr_min),
            "train.max_steps" => int(self.train.max_steps),
            "aas.epochs" => int(self.aas.epochs),
            "aas.batch" => int(self.aas.batch),
            "aas.lr" => Value::Float(self.aas.lr),
            "aas.max_steps" => int(self.aas.max_steps),
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        })
    }

    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        match key {
            "run.seed" => self.seed = as_usize(key, v)? as u64,
            "model.channels" => self.model.channels = as_usize(key, v)?,
            "model.cells" => self.model.cells = as_usize(key, v)?,
            "model.gars" => self.model.gars = as_bool(key, v)?,
            "model.genotype" => {
                self.model.genotype = as_str(key, v)?.parse().map_err(|e: Error| Error::Config(e.to_string()))?
            }
            "model.align" => {
                self.model.align = as_str(key, v)?.parse().map_err(|e: Error| Error::Config(e.to_string()))?
            }
            "data.frames" => self.data.frames = as_usize(key, v)?,
            "data.crop" => self.data.crop = as_usize(key, v)?,
            "data.flips" => self.data.flips = as_bool(key, v)?,
            "data.val_every" => self.data.val_every = as_usize(key, v)?,
            "rain.kernels" => self.rain.kernels_per_group = as_usize(key, v)?,
            "rain.short_size" => self.rain.short_size = as_usize(key, v)?,
            "rain.long_size" => self.rain.long_size = as_usize(key, v)?,
            "flow.levels" => self.flow.levels = as_usize(key, v)?,
            "flow.iterations" => self.flow.iterations = as_usize(key, v)?,
            "flow.radius" => self.flow.radius = as_usize(key, v)?,
            "flow.regularization" => self.flow.regularization = as_f64(key, v)?,
            "loss.rho" => self.loss.rho = as_f64(key, v)?,
            "loss.eta" => self.loss.eta = as_f64(key, v)?,
            "loss.ssim_window" => self.loss.window = as_usize(key, v)?,
            "loss.ssim_sigma" => self.loss.sigma = as_f64(key, v)?,
            "search.epochs" => self.search.epochs = as_usize(key, v)?,
            "search.batch" => self.search.batch = as_usize(key, v)?,
            "search.warm_start_epochs" => self.search.warm_start_epochs = as_usize(key, v)?,
            "search.arch_lr" => self.search.arch_lr = as_f64(key, v)?,
            "search.lr0" => self.search.lr0 = as_f64(key, v)?,
            "search.lr_min" => self.search.lr_min = as_f64(key, v)?,
            "search.momentum" => self.search.momentum = as_f64(key, v)?,
            "search.crop" => self.search.crop = as_usize(key, v)?,
            "search.with_companion" => self.search.with_companion = as_bool(key, v)?,
            "search.max_batches" => self.search.max_batches = as_usize(key, v)?,
            "train.epochs" => self.train.epochs = as_usize(key, v)?,
            "train.batch" => self.train.batch = as_usize(key, v)?,
            "train.lr0" => self.train.lr0 = as_f64(key, v)?,
            "train.lr_min" => self.train.lr_min = as_f64(key, v)?,
            "train.max_steps" => self.train.max_steps = as_usize(key, v)?,
            "aas.epochs" => self.aas.epochs = as_usize(key, v)?,
            "aas.batch" => self.aas.batch = as_usize(key, v)?,
            "aas.lr" => self.aas.lr = as_f64(key, v)?,
            "aas.max_steps" => self.aas.max_steps = as_usize(key, v)?,
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Applies every key of a TOML document on top of `self`, then validates.
    pub fn apply_toml(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("malformed configuration: {}", e.message())))?;
        let mut pairs = Vec::new();
        flatten("", &table, &mut pairs);
        for (key, v) in &pairs {
            self.set(key, v)?;
        }
        self.validate()
    }

    pub fn load(path: &Path, base: Config) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::NotFound(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        let mut cfg = base;
        cfg.apply_toml(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.loss.validate()?;
        ensure!(self.data.crop >= 8 && self.search.crop >= 8, Config, "crops must be at least 8 px");
        ensure!(self.data.val_every >= 2, Config, "data.val_every must be at least 2");
        ensure!(
            self.search.warm_start_epochs <= self.search.epochs,
            Config,
            "search.warm_start_epochs exceeds search.epochs"
        );
        for (name, lr) in [
            ("search.arch_lr", self.search.arch_lr),
            ("search.lr0", self.search.lr0),
            ("search.lr_min", self.search.lr_min),
            ("train.lr0", self.train.lr0),
            ("train.lr_min", self.train.lr_min),
            ("aas.lr", self.aas.lr),
        ] {
            ensure!(lr > 0.0 && lr.is_finite(), Config, "`{name}` must be positive");
        }
        ensure!(
            self.search.batch >= 1 && self.train.batch >= 1 && self.aas.batch >= 1,
            Config,
            "batch sizes must be at least 1"
        );
        ensure!(
            (0.0..1.0).contains(&self.search.momentum),
            Config,
            "search.momentum must lie in [0, 1)"
        );
        ensure!(
            self.rain.kernels_per_group >= 1 && self.rain.short_size % 2 == 1 && self.rain.long_size % 2 == 1,
            Config,
            "rain kernels need at least one per group and odd sizes"
        );
        ensure!(self.flow.levels >= 1, Config, "flow.levels must be at least 1");
        Ok(())
    }

    /// Every key with its current value, in documentation order.
    pub fn entries(&self) -> Vec<(&'static str, Value)> {
        KEYS.iter().map(|d| (d.key, self.get(d.key).expect("documented key"))).collect()
    }

    /// Canonical `key = value` text; parses back to the same configuration.
    pub fn to_toml_lines(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_lines().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Markdown table of every key with its default under `base`.
    pub fn reference_table(base: &Config) -> String {
        let mut out = String::from("| key | default | unit | meaning |\n|---|---|---|---|\n");
        for d in KEYS {
            writeln!(out, "| `{}` | `{}` | {} | {} |", d.key, base.get(d.key).unwrap(), d.unit, d.doc).unwrap();
        }
        out
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            channels: self.model.channels,
            cells: self.model.cells,
            frames: self.data.frames,
            gars: self.model.gars,
            bank: BankConfig::two_groups(self.rain.kernels_per_group, self.rain.short_size, self.rain.long_size),
            flow: self.flow.clone(),
        }
    }

    pub fn relaxed_model(&self) -> Result<Model> {
        Model::new(self.model_config(), Architecture::Relaxed)
    }

    pub fn derived_model(&self) -> Result<Model> {
        Model::new(
            self.model_config(),
            Architecture::Discrete {
                cell: self.model.genotype,
                align: self.model.align,
            },
        )
    }

    pub fn as_map(&self) -> BTreeMap<String, String> {
        self.entries().into_iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_keys_and_tables_both_apply() {
        let mut c = Config::toy();
        c.apply_toml("search.epochs = 7\n[train]\nlr0 = 0.01\n[model]\ngenotype = \"heavy\"\n").unwrap();
        assert_eq!(c.search.epochs, 7);
        assert_eq!(c.train.lr0, 0.01);
        assert_eq!(c.model.genotype, CellSpec::heavy());
    }

    #[test]
    fn unknown_and_mistyped_keys_are_rejected() {
        let mut c = Config::toy();
        let e = c.apply_toml("search.epoch = 3").unwrap_err();
        assert!(e.to_string().contains("search.epoch"));
        assert!(matches!(c.apply_toml("train.lr0 = \"fast\""), Err(Error::Config(_))));
        assert!(matches!(c.apply_toml("data.frames = 4"), Err(Error::Config(_))));
        assert!(c.apply_toml("model.genotype = \"res3,res3\"").is_err());
    }

    #[test]
    fn canonical_text_round_trips() {
        for c in [Config::light(), Config::heavy(), Config::toy()] {
            let mut back = Config::light();
            back.apply_toml(&c.to_toml_lines()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.hash(), c.hash());
        }
        assert_ne!(Config::light().hash(), Config::heavy().hash());
        assert_eq!(Config::entries(&Config::toy()).len(), KEYS.len());
    }

    #[test]
    fn presets_carry_the_published_schedule() {
        let c = Config::light();
        assert_eq!((c.search.epochs, c.search.batch, c.search.warm_start_epochs), (80, 4, 30));
        assert_eq!((c.train.epochs, c.data.crop, c.aas.epochs), (160, 240, 50));
        assert_eq!((c.loss.rho, c.loss.eta, c.aas.lr), (0.75, 0.01, 1e-6));
        assert_eq!(Config::heavy().model.align, MacroChoice::Tgm);
        assert!(Config::preset("medium").is_err());
    }
}
