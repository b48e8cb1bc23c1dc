//! Run configuration as line-oriented `key = value` text with dotted keys.
//!
//! ```text
//! # comments start with '#'
//! model.lambda0 = 0.02
//! scenario.base = 4
//! seeds = 0, 1, 2
//! ```
//!
//! Every key has a default; unknown keys, duplicate keys and malformed values
//! are config errors. [`RunConfig::to_text`] writes the full effective
//! config, which parses back to an identical value.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::BackboneConfig;
use crate::cil::{CilConfig, TrainConfig};
use crate::data::{Augment, SynthConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataSource {
    Synth,
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionChoice {
    Lpa,
    Vanilla,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub source: DataSource,
    pub synth: SynthConfig,
    /// IMG1 files, used when `source` is raw.
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub attention: AttentionChoice,
    /// Backbone settings; image size and channels are taken from the data.
    pub model: BackboneConfig,
    pub train: TrainConfig,
    pub base: usize,
    pub increment: usize,
    pub memory_capacity: usize,
    pub probe_per_class: usize,
    /// Tasks at which `train-joint` trains a baseline; `None` means all.
    pub joint_tasks: Option<Vec<usize>>,
    pub lambdas: Vec<f64>,
    pub layer_counts: Vec<usize>,
    pub rollout_residual: bool,
    pub spectrum_top: usize,
    pub save_checkpoints: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            out: PathBuf::from("runs"),
            source: DataSource::Synth,
            synth: SynthConfig {
                image_size: 8,
                channels: 1,
                stamps: 2,
                ..SynthConfig::default()
            },
            train_path: None,
            test_path: None,
            attention: AttentionChoice::Lpa,
            model: BackboneConfig {
                image_height: 8,
                image_width: 8,
                channels: 1,
                patch: 2,
                dim: 36,
                heads: 9,
                ffn_hidden: 72,
                ..BackboneConfig::default()
            },
            train: TrainConfig {
                batch: 32,
                augment: Augment::NONE,
                ..TrainConfig::default()
            },
            base: 4,
            increment: 4,
            memory_capacity: 80,
            probe_per_class: 4,
            joint_tasks: None,
            lambdas: vec![0.0, 0.02, 0.1, 1.0],
            layer_counts: vec![0, 1, 2, 3, 4, 5],
            rollout_residual: false,
            spectrum_top: crate::metrics::DEFAULT_TOP,
            save_checkpoints: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn list<T: Display>(values: &[T]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

fn path_or_empty(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `key = value` lines in order; a key may appear only once.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", no + 1)));
            }
            self.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", no + 1, strip(e))))?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seeds" => {
                self.seeds = parse_list(key, value)?;
            }
            "output.dir" => self.out = PathBuf::from(value),
            "output.checkpoints" => self.save_checkpoints = parse_bool(key, value)?,
            "data.source" => {
                self.source = match value {
                    "synth" => DataSource::Synth,
                    "raw" => DataSource::Raw,
                    _ => return Err(Error::Config(format!("{key}: expected synth or raw, got {value:?}"))),
                }
            }
            "data.train_path" => self.train_path = optional_path(value),
            "data.test_path" => self.test_path = optional_path(value),
            "data.classes" => self.synth.num_classes = parse(key, value)?,
            "data.train_per_class" => self.synth.train_per_class = parse(key, value)?,
            "data.test_per_class" => self.synth.test_per_class = parse(key, value)?,
            "data.image_size" => self.synth.image_size = parse(key, value)?,
            "data.channels" => self.synth.channels = parse(key, value)?,
            "data.stamps" => self.synth.stamps = parse(key, value)?,
            "data.distractors" => self.synth.distractors = parse(key, value)?,
            "data.noise" => self.synth.noise = parse(key, value)?,
            "data.lattice" => self.synth.lattice = parse(key, value)?,
            "scenario.base" => self.base = parse(key, value)?,
            "scenario.increment" => self.increment = parse(key, value)?,
            "model.attention" => {
                self.attention = match value {
                    "lpa" => AttentionChoice::Lpa,
                    "vanilla" => AttentionChoice::Vanilla,
                    _ => return Err(Error::Config(format!("{key}: expected lpa or vanilla, got {value:?}"))),
                }
            }
            "model.lpa_layers" => self.model.lpa_layers = parse(key, value)?,
            "model.lambda0" => self.model.lambda0 = parse(key, value)?,
            "model.alpha" => self.model.alpha = parse(key, value)?,
            "model.heads" => self.model.heads = parse(key, value)?,
            "model.dim" => self.model.dim = parse(key, value)?,
            "model.ffn_hidden" => self.model.ffn_hidden = parse(key, value)?,
            "model.patch" => self.model.patch = parse(key, value)?,
            "optim.lr" => self.train.lr = parse(key, value)?,
            "optim.epochs" => self.train.epochs = parse(key, value)?,
            "optim.batch" => self.train.batch = parse(key, value)?,
            "optim.weight_decay" => self.train.weight_decay = parse(key, value)?,
            "optim.warmup_epochs" => self.train.warmup_epochs = parse(key, value)?,
            "optim.clip_norm" => self.train.clip_norm = parse(key, value)?,
            "distill.temperature" => self.train.temperature = parse(key, value)?,
            "distill.weight" => self.train.distill_weight = parse(key, value)?,
            "augment.flip" => self.train.augment.flip = parse_bool(key, value)?,
            "augment.pad" => self.train.augment.pad = parse(key, value)?,
            "memory.capacity" => self.memory_capacity = parse(key, value)?,
            "probe.per_class" => self.probe_per_class = parse(key, value)?,
            "joint.tasks" => {
                self.joint_tasks = if value == "all" {
                    None
                } else {
                    Some(parse_list(key, value)?)
                }
            }
            "ablate.lambdas" => self.lambdas = parse_list(key, value)?,
            "ablate.lpa_layers" => self.layer_counts = parse_list(key, value)?,
            "rollout.residual" => self.rollout_residual = parse_bool(key, value)?,
            "spectrum.top" => self.spectrum_top = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its effective value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.synth;
        let m = &self.model;
        let t = &self.train;
        vec![
            ("seeds", list(&self.seeds)),
            ("output.dir", self.out.display().to_string()),
            ("output.checkpoints", self.save_checkpoints.to_string()),
            (
                "data.source",
                match self.source {
                    DataSource::Synth => "synth",
                    DataSource::Raw => "raw",
                }
                .into(),
            ),
            ("data.train_path", path_or_empty(&self.train_path)),
            ("data.test_path", path_or_empty(&self.test_path)),
            ("data.classes", s.num_classes.to_string()),
            ("data.train_per_class", s.train_per_class.to_string()),
            ("data.test_per_class", s.test_per_class.to_string()),
            ("data.image_size", s.image_size.to_string()),
            ("data.channels", s.channels.to_string()),
            ("data.stamps", s.stamps.to_string()),
            ("data.distractors", s.distractors.to_string()),
            ("data.noise", s.noise.to_string()),
            ("data.lattice", s.lattice.to_string()),
            ("scenario.base", self.base.to_string()),
            ("scenario.increment", self.increment.to_string()),
            (
                "model.attention",
                match self.attention {
                    AttentionChoice::Lpa => "lpa",
                    AttentionChoice::Vanilla => "vanilla",
                }
                .into(),
            ),
            ("model.lpa_layers", m.lpa_layers.to_string()),
            ("model.lambda0", m.lambda0.to_string()),
            ("model.alpha", m.alpha.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.dim", m.dim.to_string()),
            ("model.ffn_hidden", m.ffn_hidden.to_string()),
            ("model.patch", m.patch.to_string()),
            ("optim.lr", t.lr.to_string()),
            ("optim.epochs", t.epochs.to_string()),
            ("optim.batch", t.batch.to_string()),
            ("optim.weight_decay", t.weight_decay.to_string()),
            ("optim.warmup_epochs", t.warmup_epochs.to_string()),
            ("optim.clip_norm", t.clip_norm.to_string()),
            ("distill.temperature", t.temperature.to_string()),
            ("distill.weight", t.distill_weight.to_string()),
            ("augment.flip", t.augment.flip.to_string()),
            ("augment.pad", t.augment.pad.to_string()),
            ("memory.capacity", self.memory_capacity.to_string()),
            ("probe.per_class", self.probe_per_class.to_string()),
            (
                "joint.tasks",
                self.joint_tasks.as_ref().map_or_else(|| "all".into(), |v| list(v)),
            ),
            ("ablate.lambdas", list(&self.lambdas)),
            ("ablate.lpa_layers", list(&self.layer_counts)),
            ("rollout.residual", self.rollout_residual.to_string()),
            ("spectrum.top", self.spectrum_top.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Checks cross-field constraints that single keys cannot.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: at least one seed is required".into()));
        }
        if self.source == DataSource::Raw && (self.train_path.is_none() || self.test_path.is_none()) {
            return Err(Error::Config(
                "raw data needs data.train_path and data.test_path".into(),
            ));
        }
        if self.train.batch == 0 || self.train.epochs == 0 {
            return Err(Error::Config("optim.batch and optim.epochs must be positive".into()));
        }
        if !(self.train.lr >= 0.0 && self.train.lr.is_finite()) {
            return Err(Error::Config("optim.lr must be a finite non-negative number".into()));
        }
        if self.model.lpa_layers > crate::attention::SELF_ATTENTION_LAYERS {
            return Err(Error::Config(format!(
                "model.lpa_layers must be at most {}",
                crate::attention::SELF_ATTENTION_LAYERS
            )));
        }
        if self
            .layer_counts
            .iter()
            .any(|&c| c > crate::attention::SELF_ATTENTION_LAYERS)
        {
            return Err(Error::Config(
                "ablate.lpa_layers holds a count above the block count".into(),
            ));
        }
        if self.memory_capacity == 0 {
            return Err(Error::Config("memory.capacity must be positive".into()));
        }
        Ok(())
    }

    /// Backbone settings with the image geometry of the data and the
    /// attention choice applied.
    pub fn backbone(&self, channels: usize, height: usize, width: usize) -> BackboneConfig {
        BackboneConfig {
            image_height: height,
            image_width: width,
            channels,
            lpa_layers: match self.attention {
                AttentionChoice::Lpa => self.model.lpa_layers,
                AttentionChoice::Vanilla => 0,
            },
            ..self.model.clone()
        }
    }

    pub fn cil(&self, channels: usize, height: usize, width: usize) -> CilConfig {
        CilConfig {
            backbone: self.backbone(channels, height, width),
            train: self.train.clone(),
            memory_capacity: self.memory_capacity,
            base: self.base,
            increment: self.increment,
            probe_per_class: self.probe_per_class,
        }
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(msg) => msg,
        other => other.to_string(),
    }
}
