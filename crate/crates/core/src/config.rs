//! Serializable description of a complete run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::model::{AdapterConfig, ModelConfig, Segmenter};
use crate::nn::Module;
use crate::tensor::Element;

pub const SCHEMA_VERSION: u32 = 1;

/// AdamW hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Max per-coordinate box jitter during training, px.
    pub bbox_shift: u32,
    /// Extra held-out evaluations every this many epochs; the last epoch is
    /// always scored when a held-out set is given.
    pub eval_every: usize,
    pub threshold: f64,
    /// Pixel spacing applied to Hausdorff distances.
    pub hd_spacing: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            bbox_shift: 5,
            eval_every: 0,
            threshold: 0.5,
            hd_spacing: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    pub train_count: Option<usize>,
    pub eval_count: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub adapter: AdapterConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataPaths,
    /// Generator used when shards are produced for this run.
    #[serde(default)]
    pub synth: SynthConfig,
    /// Freezes adapters and decoder too.
    #[serde(default)]
    pub freeze_all: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            model: ModelConfig::default(),
            adapter: AdapterConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            data: DataPaths {
                train_count: Some(200),
                eval_count: Some(50),
                ..DataPaths::default()
            },
            synth: SynthConfig::desk(),
            freeze_all: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.model.validate()?;
        self.adapter.validate(&self.model)?;
        self.synth.validate()?;
        let o = &self.optim;
        if !(o.lr >= 0.0 && o.weight_decay >= 0.0 && o.eps > 0.0)
            || !(0.0..1.0).contains(&o.beta1)
            || !(0.0..1.0).contains(&o.beta2)
        {
            return Err(Error::Config(format!("optimizer settings {o:?}")));
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(t.threshold > 0.0 && t.threshold < 1.0) || !(t.hd_spacing > 0.0) {
            return Err(Error::Config(format!(
                "threshold {} must lie in (0, 1) and hd_spacing {} be positive",
                t.threshold, t.hd_spacing
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::Config(format!("{}: {j}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Freshly initialised model for this run.
    pub fn build_model<T: Element>(&self) -> Result<Segmenter<T>> {
        self.validate()?;
        let mut m = Segmenter::new(&self.model, &self.adapter, self.seed)?;
        if self.freeze_all {
            m.set_trainable(false);
        }
        Ok(m)
    }
}
