//! Flat TOML experiment configuration.
//!
//! Every key except `num_clients`, `max_rounds` and `dataset` has a default;
//! unknown keys are rejected. See the README for the key list.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataSpec, DatasetKind};
use crate::fed::{FedConfig, Synfreq};
use crate::ledger::Mode;
use crate::leakage::{AttackConfig, LabelMode};
use crate::models::{MlpSpec, ModelError};
use crate::optim::{AdamConfig, SgdConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("{field}: {msg}")]
    Invalid { field: &'static str, msg: String },
}

fn invalid(field: &'static str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field, msg: msg.into() }
}

/// The experiment to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// One party trains through its own payloads.
    Train,
    Fedavg,
    Tofu,
    /// Inversion of a raw gradient versus a decoded payload.
    Attack,
}

impl FromStr for RunMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(RunMode::Train),
            "fedavg" => Ok(RunMode::Fedavg),
            "tofu" => Ok(RunMode::Tofu),
            "attack" => Ok(RunMode::Attack),
            other => Err(format!("unknown mode {other:?}; expected train, fedavg, tofu or attack")),
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunMode::Train => "train",
            RunMode::Fedavg => "fedavg",
            RunMode::Tofu => "tofu",
            RunMode::Attack => "attack",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SynfreqValue {
    Minibatches(usize),
    Word(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackLabels {
    Known,
    Optimized,
}

macro_rules! defaults {
    ($($name:ident: $ty:ty = $val:expr;)*) => {
        mod default {
            #[allow(unused_imports)]
            use super::*;
            $(pub fn $name() -> $ty { $val })*
        }
    };
}

defaults! {
    mode: RunMode = RunMode::Tofu;
    synfreq: SynfreqValue = SynfreqValue::Minibatches(1);
    nimgs: usize = 16;
    batch_size: usize = 32;
    seed: u64 = 0;
    lr: f64 = 0.1;
    decay_factor: f64 = 0.1;
    syn_lr: f64 = 0.1;
    beta1: f64 = 0.9;
    beta2: f64 = 0.999;
    eps: f64 = 1e-8;
    syn_iters: usize = 1000;
    syn_decay_iters: Vec<usize> = vec![375, 625, 875];
    hidden: Vec<usize> = vec![48, 48];
    samples: usize = 1200;
    input_dim: usize = 8;
    classes: usize = 4;
    separation: f64 = 1.0;
    noise: f64 = 1.0;
    test_fraction: f64 = 0.25;
    attack_num_recon: usize = 1;
    attack_iters: usize = 1000;
    attack_lr: f64 = 0.1;
    attack_labels: AttackLabels = AttackLabels::Known;
}

/// One config file, with defaults filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default = "default::mode")]
    pub mode: RunMode,
    pub num_clients: usize,
    pub max_rounds: usize,
    /// Defaults to `max_rounds`.
    #[serde(default)]
    pub switch1: Option<usize>,
    /// Defaults to `max_rounds`.
    #[serde(default)]
    pub switch2: Option<usize>,
    #[serde(default = "default::synfreq")]
    pub synfreq: SynfreqValue,
    #[serde(default = "default::nimgs")]
    pub nimgs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub down_nimgs: Option<usize>,
    #[serde(default = "default::batch_size")]
    pub batch_size: usize,
    #[serde(default = "default::seed")]
    pub seed: u64,
    #[serde(default)]
    pub broadcast_per_client: bool,

    #[serde(default = "default::lr")]
    pub lr: f64,
    #[serde(default)]
    pub lr_decay_rounds: Vec<usize>,
    #[serde(default = "default::decay_factor")]
    pub lr_decay_factor: f64,

    #[serde(default = "default::syn_lr")]
    pub syn_lr_x: f64,
    #[serde(default = "default::syn_lr")]
    pub syn_lr_y: f64,
    #[serde(default = "default::syn_lr")]
    pub syn_lr_alpha: f64,
    #[serde(default = "default::beta1")]
    pub syn_beta1: f64,
    #[serde(default = "default::beta2")]
    pub syn_beta2: f64,
    #[serde(default = "default::eps")]
    pub syn_eps: f64,
    #[serde(default = "default::syn_iters")]
    pub syn_iters: usize,
    #[serde(default = "default::syn_decay_iters")]
    pub syn_decay_iters: Vec<usize>,
    #[serde(default = "default::decay_factor")]
    pub syn_decay_factor: f64,

    #[serde(default = "default::hidden")]
    pub hidden: Vec<usize>,
    /// Defaults to `seed`.
    #[serde(default)]
    pub model_seed: Option<u64>,

    pub dataset: DatasetKind,
    #[serde(default = "default::samples")]
    pub samples: usize,
    #[serde(default = "default::input_dim")]
    pub input_dim: usize,
    #[serde(default = "default::classes")]
    pub classes: usize,
    #[serde(default = "default::separation")]
    pub separation: f64,
    #[serde(default = "default::noise")]
    pub noise: f64,
    #[serde(default = "default::test_fraction")]
    pub test_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv_path: Option<PathBuf>,

    #[serde(default = "default::attack_num_recon")]
    pub attack_num_recon: usize,
    #[serde(default = "default::attack_iters")]
    pub attack_iters: usize,
    #[serde(default = "default::attack_lr")]
    pub attack_lr: f64,
    #[serde(default = "default::attack_labels")]
    pub attack_labels: AttackLabels,
}

pub fn load_config(path: &Path) -> Result<ConfigFile, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<ConfigFile, ConfigError> {
    let mut cfg: ConfigFile = toml::from_str(text).map_err(|e| ConfigError::Parse(e.message().to_string()))?;
    cfg.switch1.get_or_insert(cfg.max_rounds);
    cfg.switch2.get_or_insert(cfg.max_rounds);
    cfg.model_seed.get_or_insert(cfg.seed);
    cfg.validate()?;
    Ok(cfg)
}

impl ConfigFile {
    /// Snapshot that parses back to an equal config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.num_clients == 0 {
            return Err(invalid("num_clients", "must be >= 1"));
        }
        if self.mode == RunMode::Train && self.num_clients != 1 {
            return Err(invalid("num_clients", format!("mode train needs 1 client, got {}", self.num_clients)));
        }
        if self.max_rounds == 0 {
            return Err(invalid("max_rounds", "must be >= 1"));
        }
        let (s1, s2) = (self.switch1.unwrap_or(self.max_rounds), self.switch2.unwrap_or(self.max_rounds));
        if s1 == 0 {
            return Err(invalid("switch1", "must be >= 1"));
        }
        if s2 < s1 {
            return Err(invalid("switch2", format!("must be >= switch1 ({s2} < {s1})")));
        }
        if s2 > self.max_rounds {
            return Err(invalid(
                "switch2",
                format!("must be <= max_rounds ({s2} > {})", self.max_rounds),
            ));
        }
        match &self.synfreq {
            SynfreqValue::Minibatches(0) => return Err(invalid("synfreq", "must be >= 1")),
            SynfreqValue::Word(w) if w != "epoch" => {
                return Err(invalid("synfreq", format!("expected an integer or \"epoch\", got {w:?}")))
            }
            _ => {}
        }
        if self.nimgs == 0 {
            return Err(invalid("nimgs", "must be >= 1"));
        }
        if self.down_nimgs == Some(0) {
            return Err(invalid("down_nimgs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be >= 1"));
        }
        if self.hidden.contains(&0) {
            return Err(invalid("hidden", "widths must be >= 1"));
        }
        if self.dataset == DatasetKind::Moons && self.classes != 2 {
            return Err(invalid("classes", format!("moons has 2 classes, got {}", self.classes)));
        }
        self.sgd_config()
            .validate()
            .map_err(|e| invalid("lr", e.to_string()))?;
        self.adam_config()
            .validate()
            .map_err(|e| invalid("syn_iters", e.to_string()))?;
        self.data_spec()
            .validate()
            .map_err(|e| invalid("dataset", e.to_string()))?;
        self.attack_config()
            .validate(self.classes)
            .map_err(|e| invalid("attack_num_recon", e.to_string()))?;
        Ok(())
    }

    pub fn sgd_config(&self) -> SgdConfig {
        SgdConfig {
            lr: self.lr,
            decay_epochs: self.lr_decay_rounds.clone(),
            decay_factor: self.lr_decay_factor,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr_x: self.syn_lr_x,
            lr_y: self.syn_lr_y,
            lr_alpha: self.syn_lr_alpha,
            beta1: self.syn_beta1,
            beta2: self.syn_beta2,
            eps: self.syn_eps,
            max_iters: self.syn_iters,
            decay_iters: self.syn_decay_iters.clone(),
            decay_factor: self.syn_decay_factor,
        }
    }

    pub fn synfreq(&self) -> Synfreq {
        match self.synfreq {
            SynfreqValue::Minibatches(n) => Synfreq::Minibatches(n),
            SynfreqValue::Word(_) => Synfreq::Epoch,
        }
    }

    pub fn fed_mode(&self) -> Mode {
        match self.mode {
            RunMode::Train => Mode::SingleDevice,
            RunMode::Fedavg => Mode::Fedavg,
            RunMode::Tofu | RunMode::Attack => Mode::Tofu,
        }
    }

    pub fn fed_config(&self) -> FedConfig {
        FedConfig {
            num_clients: self.num_clients,
            synfreq: self.synfreq(),
            nimgs: self.nimgs,
            down_nimgs: self.down_nimgs,
            switch1: self.switch1.unwrap_or(self.max_rounds),
            switch2: self.switch2.unwrap_or(self.max_rounds),
            max_rounds: self.max_rounds,
            batch_size: self.batch_size,
            sgd: self.sgd_config(),
            adam: self.adam_config(),
            seed: self.seed,
            mode: self.fed_mode(),
            broadcast_per_client: self.broadcast_per_client,
        }
    }

    pub fn data_spec(&self) -> DataSpec {
        DataSpec {
            kind: self.dataset,
            samples: self.samples,
            dim: if self.dataset == DatasetKind::Moons { 2 } else { self.input_dim },
            classes: self.classes,
            separation: self.separation,
            noise: self.noise,
            test_fraction: self.test_fraction,
            csv_path: self.csv_path.clone(),
        }
    }

    /// Model for data with `input_dim` features.
    pub fn mlp_spec(&self, input_dim: usize) -> Result<MlpSpec, ModelError> {
        let mut widths = vec![input_dim];
        widths.extend(&self.hidden);
        widths.push(self.classes);
        MlpSpec::new(widths, self.model_seed.unwrap_or(self.seed))
    }

    /// Attack settings; known labels are filled in by the caller.
    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            num_recon: self.attack_num_recon,
            iters: self.attack_iters,
            lr: self.attack_lr,
            label_mode: match self.attack_labels {
                AttackLabels::Known => LabelMode::Known(vec![0; self.attack_num_recon]),
                AttackLabels::Optimized => LabelMode::Optimized,
            },
        }
    }
}
