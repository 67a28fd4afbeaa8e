//! Experiment configuration, read from TOML.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::seq2seq::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "vanilla-classifier")]
    VanillaClassifier,
    #[serde(rename = "vanilla-g")]
    VanillaG,
    #[serde(rename = "ewc-g")]
    EwcG,
    #[serde(rename = "er")]
    Er,
    #[serde(rename = "vag")]
    Vag,
    #[serde(rename = "vag+er")]
    VagEr,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::VanillaClassifier,
        Method::VanillaG,
        Method::EwcG,
        Method::Er,
        Method::Vag,
        Method::VagEr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::VanillaClassifier => "vanilla-classifier",
            Method::VanillaG => "vanilla-g",
            Method::EwcG => "ewc-g",
            Method::Er => "er",
            Method::Vag => "vag",
            Method::VagEr => "vag+er",
        }
    }

    pub fn is_classifier(self) -> bool {
        matches!(self, Method::VanillaClassifier | Method::Er)
    }

    pub fn uses_buffer(self) -> bool {
        matches!(self, Method::Er | Method::VagEr)
    }

    pub fn uses_vag(self) -> bool {
        matches!(self, Method::Vag | Method::VagEr)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Method::ALL
            .into_iter()
            .find(|m| m.name() == lower)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub lambda_lpr: f64,
    pub mu: f64,
    pub buffer_fraction: f64,
    pub ewc_weight: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_norm: f64,
    pub neighbors: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            lr: 1e-4,
            patience: 2,
            lambda_lpr: 0.1,
            mu: 1.0,
            buffer_fraction: 0.05,
            ewc_weight: 5000.0,
            clip_norm: 1.0,
            neighbors: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return err("epochs and batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return err(format!("bad learning rate {}", self.lr));
        }
        if !(self.lambda_lpr >= 0.0 && self.lambda_lpr.is_finite()) {
            return err(format!("lambda_lpr must be non-negative, got {}", self.lambda_lpr));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return err(format!("mu must be non-negative, got {}", self.mu));
        }
        if !(0.0..=1.0).contains(&self.buffer_fraction) {
            return err(format!("buffer_fraction {} outside [0, 1]", self.buffer_fraction));
        }
        if !(self.ewc_weight >= 0.0 && self.ewc_weight.is_finite()) {
            return err("ewc_weight must be non-negative".into());
        }
        if !(self.clip_norm >= 0.0) {
            return err("clip_norm must be non-negative".into());
        }
        Ok(())
    }
}

/// Denoising pretraining run once per seed before the task sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub enabled: bool,
    /// Unlabeled texts generated for synthetic data; ingested data uses its
    /// training texts instead.
    pub corpus_size: usize,
    pub epochs: usize,
    pub mask_rate: f64,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            corpus_size: 600,
            epochs: 5,
            mask_rate: 0.15,
            lr: 1e-3,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderConfig {
    pub dim: usize,
    pub seed: u64,
    /// Optional `token v1 .. vd` file.
    pub vectors: Option<PathBuf>,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            seed: 17,
            vectors: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// JSONL file to ingest; the synthetic benchmark is used when absent.
    pub path: Option<PathBuf>,
    /// Pre-split task stream directory (see `data::write_stream`); fixes the
    /// class order for every seed.
    pub stream: Option<PathBuf>,
    pub tasks: usize,
    pub classes_per_task: usize,
    pub synthetic: SyntheticSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        let synthetic = SyntheticSpec::default();
        Self {
            path: None,
            stream: None,
            tasks: synthetic.tasks,
            classes_per_task: synthetic.classes_per_task,
            synthetic,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Also train jointly on all tasks as an upper bound.
    pub joint: bool,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub embedder: EmbedderConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            methods: vec![Method::VanillaClassifier, Method::VanillaG, Method::Vag],
            seeds: vec![0, 1, 2],
            joint: false,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            embedder: EmbedderConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config("no methods selected".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("no seeds given".into()));
        }
        match (&self.data.path, &self.data.stream) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("data.path and data.stream are mutually exclusive".into()))
            }
            (None, None) => self.data.synthetic.validate()?,
            (Some(_), None) if self.data.tasks == 0 || self.data.classes_per_task == 0 => {
                return Err(Error::Config("tasks and classes_per_task must be positive".into()))
            }
            _ => {}
        }
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate()?;
        if self.embedder.dim == 0 {
            return Err(Error::Config("embedder dim must be positive".into()));
        }
        if self.pretrain.enabled && (self.pretrain.epochs == 0 || self.pretrain.batch_size == 0) {
            return Err(Error::Config("pretraining needs positive epochs and batch_size".into()));
        }
        if !(0.0..1.0).contains(&self.pretrain.mask_rate) {
            return Err(Error::Config("mask_rate must be in [0, 1)".into()));
        }
        Ok(())
    }
}
