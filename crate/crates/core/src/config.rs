//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are unique.
//! Unknown keys are rejected so typos surface instead of silently falling
//! back to defaults. See README.md for the full key list.

use crate::backbone::{ArchKind, BackboneConfig};
use crate::numerics::Activation;
use crate::side_network::{Optimizer, SideNetworkConfig};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("key `{key}`: cannot parse `{value}`")]
    Value { key: String, value: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("{0}")]
    Invalid(String),
    #[error("reading {path}: {message}")]
    Io { path: String, message: String },
}

/// Parsed key-value pairs in key order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvFile {
    entries: BTreeMap<String, String>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let syntax = |message: &str| ConfigError::Syntax {
                line: i + 1,
                message: message.to_string(),
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| syntax("expected key = value"))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() {
                return Err(syntax("empty key"));
            }
            if entries.insert(k.to_string(), v.to_string()).is_some() {
                return Err(syntax(&format!("duplicate key `{k}`")));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        self.raw(key)
            .map(|v| {
                v.parse().map_err(|_| ConfigError::Value {
                    key: key.to_string(),
                    value: v.to_string(),
                })
            })
            .transpose()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// How the device ships activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Transmit {
    #[default]
    Pivot,
    /// Every token of every layer, for baseline measurements.
    Full,
}

/// Every knob of a session, shared by the device, server and simulator.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub session_id: u64,
    pub arch: ArchKind,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub vocab: usize,
    pub classes: usize,
    pub backbone_seed: u64,
    pub bottleneck: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub activation: Activation,
    pub side_seed: u64,
    pub nonce_seed: u64,
    /// `synthetic` or a path to a `label<TAB>text` file.
    pub data: String,
    pub samples: usize,
    pub data_seed: u64,
    pub batch: usize,
    pub queue_depth: usize,
    pub epochs: u32,
    pub tolerance: f64,
    pub patience: u32,
    pub transmit: Transmit,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            session_id: 1,
            arch: ArchKind::Autoregressive,
            layers: 4,
            hidden: 64,
            heads: 4,
            seq_len: 16,
            vocab: 64,
            classes: 2,
            backbone_seed: 0,
            bottleneck: 16,
            learning_rate: SideNetworkConfig::DEFAULT_LEARNING_RATE,
            optimizer: Optimizer::default(),
            activation: Activation::Relu,
            side_seed: 0,
            nonce_seed: 0,
            data: "synthetic".into(),
            samples: 2048,
            data_seed: 0,
            batch: 8,
            queue_depth: 4,
            epochs: 20,
            tolerance: 1e-5,
            patience: 3,
            transmit: Transmit::Pivot,
        }
    }
}

const KEYS: &[&str] = &[
    "session_id",
    "arch",
    "layers",
    "hidden",
    "heads",
    "seq_len",
    "vocab",
    "classes",
    "backbone_seed",
    "bottleneck",
    "learning_rate",
    "optimizer",
    "beta1",
    "beta2",
    "eps",
    "activation",
    "side_seed",
    "nonce_seed",
    "data",
    "samples",
    "data_seed",
    "batch",
    "queue_depth",
    "epochs",
    "tolerance",
    "patience",
    "transmit",
];

impl RunConfig {
    pub fn from_kv(kv: &KvFile) -> Result<Self, ConfigError> {
        if let Some(k) = kv.keys().find(|k| !KEYS.contains(k)) {
            return Err(ConfigError::UnknownKey(k.to_string()));
        }
        let mut c = Self::default();
        macro_rules! take {
            ($field:ident) => {
                if let Some(v) = kv.get(stringify!($field))? {
                    c.$field = v;
                }
            };
        }
        take!(session_id);
        take!(layers);
        take!(hidden);
        take!(heads);
        take!(seq_len);
        take!(vocab);
        take!(classes);
        take!(backbone_seed);
        take!(bottleneck);
        take!(learning_rate);
        take!(side_seed);
        take!(nonce_seed);
        take!(data);
        take!(samples);
        take!(data_seed);
        take!(batch);
        take!(queue_depth);
        take!(epochs);
        take!(tolerance);
        take!(patience);
        let bad = |key: &str, value: &str| ConfigError::Value {
            key: key.into(),
            value: value.into(),
        };
        if let Some(v) = kv.raw("arch") {
            c.arch = ArchKind::from_name(v).ok_or_else(|| bad("arch", v))?;
        }
        if let Some(v) = kv.raw("activation") {
            c.activation = Activation::from_name(v).ok_or_else(|| bad("activation", v))?;
        }
        if let Some(v) = kv.raw("transmit") {
            c.transmit = match v {
                "pivot" => Transmit::Pivot,
                "full" => Transmit::Full,
                _ => return Err(bad("transmit", v)),
            };
        }
        let (mut b1, mut b2, mut eps) = (0.9, 0.999, 1e-8);
        if let Some(v) = kv.get("beta1")? {
            b1 = v;
        }
        if let Some(v) = kv.get("beta2")? {
            b2 = v;
        }
        if let Some(v) = kv.get("eps")? {
            eps = v;
        }
        c.optimizer = match kv.raw("optimizer").unwrap_or("adam") {
            "adam" => Optimizer::Adam {
                beta1: b1,
                beta2: b2,
                eps,
            },
            "sgd" => Optimizer::Sgd,
            v => return Err(bad("optimizer", v)),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::from_kv(&KvFile::parse(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_kv(&KvFile::load(path)?)
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::default();
        kv.set("session_id", self.session_id);
        kv.set("arch", self.arch.name());
        kv.set("layers", self.layers);
        kv.set("hidden", self.hidden);
        kv.set("heads", self.heads);
        kv.set("seq_len", self.seq_len);
        kv.set("vocab", self.vocab);
        kv.set("classes", self.classes);
        kv.set("backbone_seed", self.backbone_seed);
        kv.set("bottleneck", self.bottleneck);
        kv.set("learning_rate", self.learning_rate);
        match self.optimizer {
            Optimizer::Sgd => kv.set("optimizer", "sgd"),
            Optimizer::Adam { beta1, beta2, eps } => {
                kv.set("optimizer", "adam");
                kv.set("beta1", beta1);
                kv.set("beta2", beta2);
                kv.set("eps", eps);
            }
        }
        kv.set("activation", self.activation.name());
        kv.set("side_seed", self.side_seed);
        kv.set("nonce_seed", self.nonce_seed);
        kv.set("data", &self.data);
        kv.set("samples", self.samples);
        kv.set("data_seed", self.data_seed);
        kv.set("batch", self.batch);
        kv.set("queue_depth", self.queue_depth);
        kv.set("epochs", self.epochs);
        kv.set("tolerance", self.tolerance);
        kv.set("patience", self.patience);
        kv.set(
            "transmit",
            match self.transmit {
                Transmit::Pivot => "pivot",
                Transmit::Full => "full",
            },
        );
        kv
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.backbone_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.side_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.batch == 0 || self.queue_depth == 0 || self.epochs == 0 {
            return Err(ConfigError::Invalid(
                "batch, queue_depth and epochs must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            num_layers: self.layers,
            hidden_size: self.hidden,
            num_heads: self.heads,
            seq_len: self.seq_len,
            vocab_size: self.vocab,
            num_classes: self.classes,
            arch_kind: self.arch,
            init_seed: self.backbone_seed,
        }
    }

    pub fn side_config(&self) -> SideNetworkConfig {
        SideNetworkConfig {
            num_layers: self.layers,
            hidden: self.hidden,
            bottleneck: self.bottleneck,
            num_classes: self.classes,
            learning_rate: self.learning_rate,
            optimizer: self.optimizer,
            activation: self.activation,
            init_seed: self.side_seed,
        }
    }
}
