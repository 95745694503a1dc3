use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{self, Manifest};
use super::config::TrainConfig;
use super::eval::evaluate;
use super::loss::{cross_entropy, one_hot_targets};
use super::optim::{lr_schedule, Sgd};
use crate::data::{batches, Dataset, DatasetLayout};
use crate::edges::{edge_clues, EdgeMap};
use crate::error::{Error, Result};
use crate::image::Mask;
use crate::metrics::MetricReport;
use crate::model::{ChangeModel, ModelConfig, ModelInput};
use crate::nn::Ctx;
use crate::rng::{stream, Purpose};
use crate::synthesis::{apply_augment, draw_augment, synthesize_training_pair, BitemporalSample, Slot, SynthesisConfig};

pub const BEST_DIR: &str = "best";
pub const LAST_DIR: &str = "last";
pub const LOG_FILE: &str = "train_log.jsonl";

/// One synthesized and augmented training example.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub sample: BitemporalSample,
    pub edges: Option<EdgeMap>,
}

/// Synthesis, edge clues and augmentation for sample `index` at `epoch`.
/// Edge clues follow the flips applied to the images.
pub fn training_example(
    sample: &BitemporalSample,
    model: &ModelConfig,
    syn: &SynthesisConfig,
    epoch: u64,
    index: u64,
) -> Result<TrainingExample> {
    let pair = synthesize_training_pair(sample, syn, &mut stream(syn.seed, epoch, index, Purpose::Synthesis))?;
    let edges = if model.uses_edges() {
        let (hr_s, lr_s) = match syn.degraded_slot {
            Slot::Post => (&pair.sample.pre, &pair.sample.post),
            Slot::Pre => (&pair.sample.post, &pair.sample.pre),
        };
        let lr = if model.edges_from_swapped { lr_s } else { &pair.lr_upsampled };
        Some(edge_clues(hr_s, lr, &model.canny)?)
    } else {
        None
    };
    let d = draw_augment(syn, &mut stream(syn.seed, epoch, index, Purpose::Augment));
    let sample = apply_augment(&pair.sample, &d)?;
    let edges = edges.map(|mut e| {
        if d.hflip {
            e = e.flip_horizontal();
        }
        if d.vflip {
            e = e.flip_vertical();
        }
        e
    });
    Ok(TrainingExample { sample, edges })
}

/// Stacked network input and one-hot targets for a list of dataset indices.
pub fn training_batch(
    data: &[BitemporalSample],
    indices: &[usize],
    model: &ChangeModel,
    syn: &SynthesisConfig,
    epoch: u64,
) -> Result<(ModelInput, Tensor)> {
    let examples = indices
        .par_iter()
        .map(|&i| training_example(&data[i], model.config(), syn, epoch, i as u64))
        .collect::<Result<Vec<_>>>()?;
    let samples: Vec<&BitemporalSample> = examples.iter().map(|e| &e.sample).collect();
    let edges: Option<Vec<EdgeMap>> = examples.iter().map(|e| e.edges.clone()).collect();
    let input = ModelInput::from_samples(&samples, edges.as_deref(), model.dtype())?;
    let labels: Vec<&Mask> = examples.iter().map(|e| e.sample.label.as_ref()).collect();
    Ok((input, one_hot_targets(&labels, model.dtype())?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u64,
    pub step: u64,
    pub mean_loss: f64,
    pub lr: f64,
    pub losses: Vec<f64>,
    pub val: Option<MetricReport>,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: ChangeModel,
    opt: Sgd,
    train: Dataset,
    val: Dataset,
    out_dir: PathBuf,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps.
    pub step: u64,
    pub best_val_f1: Option<f64>,
}

impl Trainer {
    /// Loads the train split at the training ratio and the val split at HR.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = DatasetLayout::new(&cfg.dataset);
        let train = Dataset::load(&layout, "train", cfg.synthesis.r_d, cfg.synthesis.degraded_slot)?;
        let val = Dataset::load_hr(&layout, "val")?;
        for s in &train.samples {
            cfg.model.check_input(s.label.height(), s.label.width())?;
        }
        let model = ChangeModel::new(cfg.model.clone(), cfg.precision.dtype(), cfg.seed)?;
        let opt = Sgd::new(cfg.momentum, cfg.weight_decay);
        let out_dir = cfg.resolved_output_dir();
        fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        Ok(Self {
            cfg,
            model,
            opt,
            train,
            val,
            out_dir,
            epoch: 0,
            step: 0,
            best_val_f1: None,
        })
    }

    /// Continues from a checkpoint written by a run with the same config.
    pub fn resume(cfg: TrainConfig, dir: &Path) -> Result<Self> {
        let ck = checkpoint::load(dir)?;
        if ck.manifest.config_hash != cfg.hash() {
            return Err(Error::Checkpoint(format!(
                "checkpoint config hash {} does not match {}",
                ck.manifest.config_hash,
                cfg.hash()
            )));
        }
        let mut t = Self::new(cfg)?;
        t.model.store().load_state(&ck.state)?;
        t.opt.load_state(ck.optimizer, t.model.store().params())?;
        t.epoch = ck.manifest.epoch;
        t.step = ck.manifest.step;
        t.best_val_f1 = ck.manifest.best_val_f1;
        Ok(t)
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn train_set(&self) -> &Dataset {
        &self.train
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.train.len().div_ceil(self.cfg.batch_size) as u64
    }

    pub fn total_steps(&self) -> u64 {
        let full = self.cfg.epochs * self.steps_per_epoch();
        self.cfg.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.cfg.epochs || self.step >= self.total_steps()
    }

    /// One optimizer step on the given dataset indices; returns the loss.
    pub fn step_on(&mut self, indices: &[usize]) -> Result<f64> {
        let (input, targets) = training_batch(&self.train.samples, indices, &self.model, &self.cfg.synthesis, self.epoch)?;
        let ctx = Ctx::train(self.cfg.seed, self.step);
        let logits = self.model.hr_logits(&input, &ctx)?;
        let loss = cross_entropy(&logits, &targets)?;
        let grads = loss.backward()?;
        let lr = lr_schedule(self.cfg.lr0, self.step, self.total_steps());
        self.opt.step(self.model.store().params(), &grads, lr)?;
        self.step += 1;
        Ok(loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
    }

    pub fn validate(&self) -> Result<MetricReport> {
        let r = evaluate(
            &self.model,
            &self.val.samples,
            self.cfg.synthesis.r_d,
            self.cfg.synthesis.degraded_slot,
            self.cfg.batch_size,
        )?;
        Ok(r.report)
    }

    /// Runs one epoch, validates, logs and checkpoints.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let lr = lr_schedule(self.cfg.lr0, self.step, self.total_steps());
        let mut losses = Vec::new();
        for batch in batches(self.train.len(), self.cfg.batch_size, self.cfg.seed, self.epoch)? {
            if self.step >= self.total_steps() {
                break;
            }
            losses.push(self.step_on(&batch)?);
        }
        self.epoch += 1;
        let last = self.is_finished();
        let val = if last || self.epoch % self.cfg.val_every == 0 {
            Some(self.validate()?)
        } else {
            None
        };
        let mean_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
        let val_f1 = val.map(|v| v.f1);
        let improved = matches!((val_f1, self.best_val_f1), (Some(f), None) if f.is_finite())
            || matches!((val_f1, self.best_val_f1), (Some(f), Some(b)) if f > b);
        if improved {
            self.best_val_f1 = val_f1;
        }
        let manifest = Manifest::new(&self.cfg, self.epoch, self.step, val_f1, self.best_val_f1);
        if improved {
            checkpoint::save_model(&self.out_dir.join(BEST_DIR), &manifest, &self.model, self.opt.state())?;
        }
        checkpoint::save_model(&self.out_dir.join(LAST_DIR), &manifest, &self.model, self.opt.state())?;
        let log = EpochLog {
            epoch: self.epoch,
            step: self.step,
            mean_loss,
            lr,
            losses,
            val,
        };
        match val_f1 {
            Some(f) => log::info!(
                "epoch {} step {} loss {:.6} lr {:.6} val_f1 {:.4}",
                log.epoch,
                log.step,
                log.mean_loss,
                log.lr,
                f
            ),
            None => log::info!("epoch {} step {} loss {:.6} lr {:.6}", log.epoch, log.step, log.mean_loss, log.lr),
        }
        self.append_log(&log)?;
        Ok(log)
    }

    fn append_log(&self, log: &EpochLog) -> Result<()> {
        let path = self.out_dir.join(LOG_FILE);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let line = serde_json::to_string(log)?;
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))
    }

    /// Trains until `epoch_limit` epochs are complete (or the run ends).
    pub fn run_until(&mut self, epoch_limit: u64) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while !self.is_finished() && self.epoch < epoch_limit {
            logs.push(self.run_epoch()?);
        }
        Ok(logs)
    }

    pub fn run(&mut self) -> Result<Vec<EpochLog>> {
        self.run_until(u64::MAX)
    }
}

/// Reads a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                row: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
