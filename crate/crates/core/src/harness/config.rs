use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::SweepSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synthesis::SynthesisConfig;

/// Environment variable that replaces `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "SILI_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: u64,
    pub batch_size: usize,
    /// Stops after this many optimizer steps; the schedule decays over
    /// `min(max_steps, epochs · batches_per_epoch)`.
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub precision: Precision,
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    /// Validate every this many epochs (the last epoch always validates).
    pub val_every: u64,
    pub model: ModelConfig,
    pub synthesis: SynthesisConfig,
    pub sweep: SweepSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 200,
            batch_size: 8,
            max_steps: None,
            seed: 0,
            precision: Precision::F32,
            dataset: PathBuf::from("data"),
            output_dir: PathBuf::from("runs/default"),
            val_every: 1,
            model: ModelConfig::default(),
            synthesis: SynthesisConfig::default(),
            sweep: SweepSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if cfg.dataset.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.dataset = dir.join(&cfg.dataset);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(Error::Config("lr0 must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.val_every == 0 {
            return Err(Error::Config("epochs, batch_size and val_every must be >= 1".into()));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be >= 1".into()));
        }
        self.model.validate()?;
        self.synthesis.validate()?;
        self.sweep.validate()?;
        Ok(())
    }

    /// `output_dir`, unless the environment overrides it.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }

    /// Hash of everything that affects the training trajectory; paths are
    /// excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.dataset = PathBuf::new();
        c.output_dir = PathBuf::new();
        json_hash(&c)
    }
}

/// Hash of the network definition alone.
pub fn model_hash(cfg: &ModelConfig) -> String {
    let mut c = cfg.clone();
    c.backbone_weights = None;
    json_hash(&c)
}

fn json_hash<T: Serialize>(v: &T) -> String {
    let bytes = serde_json::to_vec(v).expect("config serializes");
    hex::encode(Sha256::digest(bytes))
}
