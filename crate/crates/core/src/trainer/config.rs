//! Training configuration and its flat `key = value` text format.
//!
//! Every key must appear exactly once; `#` starts a comment. Unknown keys are
//! rejected, as are missing ones (the error names the key).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::optim::OptimizerKind;
use crate::backbone::{format_blocks, parse_blocks, BackboneConfig, ConvBlock};
use crate::bilinear::BilinearPooling;
use crate::losses::Margins;
use crate::mining::{MiningSchedule, SamplerConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Leading epochs that train only the bilinear classifier branch.
    pub phase1_epochs: usize,
    /// Step size of the joint phase.
    pub learning_rate: f64,
    pub phase1_learning_rate: f64,
    pub optimizer_phase1: OptimizerKind,
    pub optimizer_phase2: OptimizerKind,
    pub sampler: SamplerConfig,
    pub margins: Margins,
    /// Accepted and stored; the joint objective does not use it.
    pub beta: f64,
    pub similarity_momentum: f64,
    pub seed: u64,
    /// `(height, width)` every image is resized to.
    pub image_size: (usize, usize),
    pub conv_blocks: Vec<ConvBlock>,
    pub embedding_dim: usize,
    pub dropout_rate: f64,
    pub shared_streams: bool,
    pub bilinear_pooling: BilinearPooling,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub augment: bool,
    /// `None` means one pass worth of batches: `ceil(train_len / batch_size)`.
    pub steps_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let backbone = BackboneConfig::default();
        Self {
            epochs: 30,
            phase1_epochs: 6,
            learning_rate: 1e-4,
            phase1_learning_rate: 1e-3,
            optimizer_phase1: OptimizerKind::Adam,
            optimizer_phase2: OptimizerKind::Sgd,
            sampler: SamplerConfig::default(),
            margins: Margins::default(),
            beta: 0.0,
            similarity_momentum: 0.9,
            seed: 0,
            image_size: (backbone.input_size[1], backbone.input_size[2]),
            conv_blocks: backbone.conv_blocks,
            embedding_dim: backbone.embedding_dim,
            dropout_rate: backbone.dropout_rate,
            shared_streams: backbone.shared_streams,
            bilinear_pooling: backbone.pooling,
            grad_clip: None,
            augment: true,
            steps_per_epoch: None,
        }
    }
}

/// Config keys in file order.
pub const CONFIG_KEYS: &[&str] = &[
    "epochs",
    "phase1_epochs",
    "learning_rate",
    "phase1_learning_rate",
    "optimizer_phase1",
    "optimizer_phase2",
    "batch_classes",
    "batch_samples_per_class",
    "mining",
    "oversample_with_similarity",
    "mu1",
    "mu2",
    "b",
    "alpha",
    "beta",
    "dropout_rate",
    "similarity_momentum",
    "seed",
    "image_size",
    "conv_blocks",
    "embedding_dim",
    "shared_streams",
    "bilinear_pooling",
    "grad_clip",
    "augment",
    "steps_per_epoch",
];

impl TrainConfig {
    /// Default schedule for `epochs` epochs: the first 20% (rounded) in phase one.
    pub fn with_epochs(epochs: usize) -> Self {
        Self {
            epochs,
            phase1_epochs: default_phase1(epochs),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.phase1_epochs > self.epochs {
            return Err(Error::Config(format!(
                "phase1_epochs {} exceeds epochs {}",
                self.phase1_epochs, self.epochs
            )));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("phase1_learning_rate", self.phase1_learning_rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.beta.is_finite() {
            return Err(Error::Config("beta must be finite".into()));
        }
        if !(0.0..1.0).contains(&self.similarity_momentum) {
            return Err(Error::Config(format!(
                "similarity_momentum {} outside [0, 1)",
                self.similarity_momentum
            )));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!(
                    "grad_clip must be positive, got {c}"
                )));
            }
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps_per_epoch must be positive".into()));
        }
        self.sampler.validate()?;
        self.margins.validate()?;
        self.backbone(3, 2).validate()
    }

    /// Network configuration for `channels`-channel images over `num_classes`.
    pub fn backbone(&self, channels: usize, num_classes: usize) -> BackboneConfig {
        BackboneConfig {
            input_size: [channels, self.image_size.0, self.image_size.1],
            conv_blocks: self.conv_blocks.clone(),
            embedding_dim: self.embedding_dim,
            dropout_rate: self.dropout_rate,
            shared_streams: self.shared_streams,
            num_classes,
            pooling: self.bilinear_pooling,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let key = key.trim();
            if !CONFIG_KEYS.contains(&key) {
                return Err(Error::Config(format!(
                    "line {}: unknown key '{key}'",
                    n + 1
                )));
            }
            if entries.insert(key, (n + 1, value.trim())).is_some() {
                return Err(Error::Config(format!(
                    "line {}: duplicate key '{key}'",
                    n + 1
                )));
            }
        }
        if let Some(missing) = CONFIG_KEYS.iter().find(|k| !entries.contains_key(*k)) {
            return Err(Error::Config(format!("missing key '{missing}'")));
        }
        let get = |key: &str| entries[key];
        let cfg = Self {
            epochs: value(get("epochs"), "epochs")?,
            phase1_epochs: value(get("phase1_epochs"), "phase1_epochs")?,
            learning_rate: value(get("learning_rate"), "learning_rate")?,
            phase1_learning_rate: value(get("phase1_learning_rate"), "phase1_learning_rate")?,
            optimizer_phase1: value(get("optimizer_phase1"), "optimizer_phase1")?,
            optimizer_phase2: value(get("optimizer_phase2"), "optimizer_phase2")?,
            sampler: SamplerConfig {
                classes_per_batch: value(get("batch_classes"), "batch_classes")?,
                samples_per_class: value(
                    get("batch_samples_per_class"),
                    "batch_samples_per_class",
                )?,
                mining: value::<MiningSchedule>(get("mining"), "mining")?,
                oversample_with_similarity: value(
                    get("oversample_with_similarity"),
                    "oversample_with_similarity",
                )?,
            },
            margins: Margins {
                mu1: value(get("mu1"), "mu1")?,
                mu2: value(get("mu2"), "mu2")?,
                b: value(get("b"), "b")?,
                alpha_t: value(get("alpha"), "alpha")?,
            },
            beta: value(get("beta"), "beta")?,
            dropout_rate: value(get("dropout_rate"), "dropout_rate")?,
            similarity_momentum: value(get("similarity_momentum"), "similarity_momentum")?,
            seed: value(get("seed"), "seed")?,
            image_size: parse_size(get("image_size").1).map_err(|e| {
                Error::Config(format!("line {}: image_size: {e}", get("image_size").0))
            })?,
            conv_blocks: parse_blocks(get("conv_blocks").1).map_err(|e| {
                Error::Config(format!("line {}: conv_blocks: {e}", get("conv_blocks").0))
            })?,
            embedding_dim: value(get("embedding_dim"), "embedding_dim")?,
            shared_streams: value(get("shared_streams"), "shared_streams")?,
            bilinear_pooling: value::<BilinearPooling>(
                get("bilinear_pooling"),
                "bilinear_pooling",
            )?,
            grad_clip: optional(get("grad_clip"), "grad_clip", "none")?,
            augment: value(get("augment"), "augment")?,
            steps_per_epoch: optional(get("steps_per_epoch"), "steps_per_epoch", "auto")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_config_string(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("epochs", self.epochs.to_string());
        put("phase1_epochs", self.phase1_epochs.to_string());
        put("learning_rate", self.learning_rate.to_string());
        put(
            "phase1_learning_rate",
            self.phase1_learning_rate.to_string(),
        );
        put("optimizer_phase1", self.optimizer_phase1.to_string());
        put("optimizer_phase2", self.optimizer_phase2.to_string());
        put("batch_classes", self.sampler.classes_per_batch.to_string());
        put(
            "batch_samples_per_class",
            self.sampler.samples_per_class.to_string(),
        );
        put("mining", self.sampler.mining.to_string());
        put(
            "oversample_with_similarity",
            self.sampler.oversample_with_similarity.to_string(),
        );
        put("mu1", self.margins.mu1.to_string());
        put("mu2", self.margins.mu2.to_string());
        put("b", self.margins.b.to_string());
        put("alpha", self.margins.alpha_t.to_string());
        put("beta", self.beta.to_string());
        put("dropout_rate", self.dropout_rate.to_string());
        put("similarity_momentum", self.similarity_momentum.to_string());
        put("seed", self.seed.to_string());
        put(
            "image_size",
            format!("{}x{}", self.image_size.0, self.image_size.1),
        );
        put("conv_blocks", format_blocks(&self.conv_blocks));
        put("embedding_dim", self.embedding_dim.to_string());
        put("shared_streams", self.shared_streams.to_string());
        put(
            "bilinear_pooling",
            match self.bilinear_pooling {
                BilinearPooling::Sum => "sum".into(),
                BilinearPooling::Average => "average".into(),
            },
        );
        put(
            "grad_clip",
            self.grad_clip.map_or("none".into(), |c| c.to_string()),
        );
        put("augment", self.augment.to_string());
        put(
            "steps_per_epoch",
            self.steps_per_epoch
                .map_or("auto".into(), |c| c.to_string()),
        );
        s
    }
}

impl FromStr for TrainConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}

pub fn default_phase1(epochs: usize) -> usize {
    (epochs as f64 * 0.2).round() as usize
}

fn value<T: FromStr>((line, raw): (usize, &str), key: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    raw.parse::<T>()
        .map_err(|e| Error::Config(format!("line {line}: {key}: cannot parse '{raw}': {e}")))
}

fn optional<T: FromStr>((line, raw): (usize, &str), key: &str, none: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if raw == none {
        Ok(None)
    } else {
        value((line, raw), key).map(Some)
    }
}

/// `HxW` or a single number for square images.
pub fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let parse = |p: &str| {
        p.trim()
            .parse::<usize>()
            .map_err(|_| format!("bad size '{s}'"))
    };
    let (h, w) = match s.split_once('x') {
        Some((h, w)) => (parse(h)?, parse(w)?),
        None => {
            let n = parse(s)?;
            (n, n)
        }
    };
    if h == 0 || w == 0 {
        return Err(format!("size '{s}' has a zero dimension"));
    }
    Ok((h, w))
}
