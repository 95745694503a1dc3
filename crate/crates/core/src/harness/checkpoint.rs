//! Checkpoint directories: `params.safetensors` (parameters and
//! normalization statistics), `optimizer.safetensors` (momentum buffers) and
//! `manifest.json`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{model_hash, TrainConfig};
use crate::decoder::BUNDLE_LAYOUT;
use crate::error::{Error, Result};
use crate::model::ChangeModel;

pub const FORMAT_VERSION: u32 = 1;
pub const PARAMS_FILE: &str = "params.safetensors";
pub const OPTIMIZER_FILE: &str = "optimizer.safetensors";
pub const MANIFEST_FILE: &str = "manifest.json";
/// Degenerate-case rule for the metrics, recorded with every result.
pub const METRIC_CONVENTION: &str = "no-positives=>1;single-zero-denominator=>0;oa=(tp+tn)/total";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub bundle_layout: String,
    pub metric_convention: String,
    pub config_hash: String,
    pub model_hash: String,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    pub val_f1: Option<f64>,
    pub best_val_f1: Option<f64>,
    pub params_sha256: String,
}

impl Manifest {
    pub fn new(config: &TrainConfig, epoch: u64, step: u64, val_f1: Option<f64>, best_val_f1: Option<f64>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            bundle_layout: BUNDLE_LAYOUT.to_string(),
            metric_convention: METRIC_CONVENTION.to_string(),
            config_hash: config.hash(),
            model_hash: model_hash(&config.model),
            config: config.clone(),
            epoch,
            step,
            val_f1,
            best_val_f1,
            params_sha256: String::new(),
        }
    }

    /// Refuses checkpoints written by another format or decoder layout.
    pub fn check_compatible(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.bundle_layout != BUNDLE_LAYOUT {
            return Err(Error::Checkpoint(format!(
                "decoder bundle layout {:?} differs from {BUNDLE_LAYOUT:?}",
                self.bundle_layout
            )));
        }
        Ok(())
    }

    /// Refuses a checkpoint whose network differs from `cfg`'s.
    pub fn check_model(&self, cfg: &TrainConfig) -> Result<()> {
        let expect = model_hash(&cfg.model);
        if self.model_hash != expect {
            return Err(Error::Checkpoint(format!(
                "checkpoint model hash {} does not match configuration {expect}",
                self.model_hash
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub state: BTreeMap<String, Tensor>,
    pub optimizer: BTreeMap<String, Tensor>,
}

fn write_tensors(path: &Path, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let map: HashMap<&str, Tensor> = tensors.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    candle_core::safetensors::save(&map, path)?;
    Ok(())
}

fn read_tensors(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    if !path.is_file() {
        return Err(Error::Checkpoint(format!("missing {}", path.display())));
    }
    Ok(candle_core::safetensors::load(path, &Device::Cpu)?.into_iter().collect())
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Writes a checkpoint directory, replacing any previous one at `dir`.
pub fn save(dir: &Path, manifest: &Manifest, state: &BTreeMap<String, Tensor>, optimizer: &BTreeMap<String, Tensor>) -> Result<()> {
    let tmp = tmp_dir(dir);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    write_tensors(&tmp.join(PARAMS_FILE), state)?;
    write_tensors(&tmp.join(OPTIMIZER_FILE), optimizer)?;
    let mut manifest = manifest.clone();
    manifest.params_sha256 = file_sha256(&tmp.join(PARAMS_FILE))?;
    let json = serde_json::to_string_pretty(&manifest)?;
    let mpath = tmp.join(MANIFEST_FILE);
    fs::write(&mpath, json + "\n").map_err(|e| Error::io(&mpath, e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

fn tmp_dir(dir: &Path) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    dir.with_file_name(name)
}

pub fn save_model(dir: &Path, manifest: &Manifest, model: &ChangeModel, optimizer: &BTreeMap<String, Tensor>) -> Result<()> {
    save(dir, manifest, &model.store().state(), optimizer)
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", mpath.display())))?;
    manifest.check_compatible()?;
    let ppath = dir.join(PARAMS_FILE);
    let digest = file_sha256(&ppath)?;
    if digest != manifest.params_sha256 {
        return Err(Error::Checkpoint(format!(
            "{} does not match the digest recorded in the manifest",
            ppath.display()
        )));
    }
    Ok(Checkpoint {
        state: read_tensors(&ppath)?,
        optimizer: read_tensors(&dir.join(OPTIMIZER_FILE))?,
        manifest,
    })
}

impl Checkpoint {
    /// Rebuilds the network recorded in the manifest with the stored weights.
    pub fn build_model(&self) -> Result<ChangeModel> {
        let cfg = &self.manifest.config;
        let mut model_cfg = cfg.model.clone();
        model_cfg.backbone_weights = None;
        let model = ChangeModel::new(model_cfg, cfg.precision.dtype(), cfg.seed)?;
        model.store().load_state(&self.state)?;
        Ok(model)
    }
}
