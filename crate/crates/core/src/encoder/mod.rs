//! Siamese multi-level encoder with windowed bitemporal interaction, per-level
//! projection and bitemporal fusion.

mod backbone;
mod fusion;
mod interaction;
pub mod window;

use std::collections::BTreeSet;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

pub use backbone::{Backbone, BackboneKind, ResNet};
pub use fusion::{EdgeConv, FusedFeatures, Fusion};
pub use interaction::BitemporalInteraction;

use crate::error::{Error, Result};
use crate::nn::{Ctx, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InteractionMode {
    #[default]
    Windowed,
    /// Attention over all tokens of both maps; ablation only.
    NonLocal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InteractionConfig {
    pub mode: InteractionMode,
    pub window_size: usize,
    /// 1-based feature levels that receive an interaction stage.
    pub levels: BTreeSet<usize>,
    pub n_layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub dropout: f64,
}

impl Default for InteractionConfig {
    fn default() -> Self {
        Self {
            mode: InteractionMode::Windowed,
            window_size: 8,
            levels: [1, 2, 3].into_iter().collect(),
            n_layers: 1,
            heads: 4,
            mlp_ratio: 4,
            dropout: 0.0,
        }
    }
}

impl InteractionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 {
            return Err(Error::Config("window_size must be >= 1".into()));
        }
        if let Some(l) = self.levels.iter().find(|&&l| !(1..=4).contains(&l)) {
            return Err(Error::Config(format!("interaction level {l} is not in 1..=4")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} is not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Checks that every configured level divides into windows for an
    /// input of `h × w` pixels.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if self.mode == InteractionMode::NonLocal {
            return Ok(());
        }
        for &j in &self.levels {
            let (hj, wj) = level_size(h, w, j);
            if hj % self.window_size != 0 || wj % self.window_size != 0 {
                return Err(Error::invalid(format!(
                    "level {j} map {hj}x{wj} is not divisible by window size {}",
                    self.window_size
                )));
            }
        }
        Ok(())
    }
}

/// Spatial size of level `j` for an `h × w` input.
pub fn level_size(h: usize, w: usize, level: usize) -> (usize, usize) {
    (h >> (level + 1), w >> (level + 1))
}

/// Per-level features `(B, C_j, H/2^(j+1), W/2^(j+1))` for `j = 1..=4`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

pub struct Encoder {
    backbone: Box<dyn Backbone>,
    interactions: Vec<Option<BitemporalInteraction>>,
}

impl Encoder {
    /// `interaction: None` builds the plain Siamese encoder.
    pub fn new(vs: &mut Scope, kind: BackboneKind, interaction: Option<&InteractionConfig>) -> Result<Self> {
        let backbone = ResNet::new(&mut vs.pp("backbone"), kind)?;
        let widths = backbone.widths();
        let mut interactions = Vec::with_capacity(4);
        for j in 1..=4 {
            let stage = match interaction {
                Some(cfg) if cfg.levels.contains(&j) => Some(BitemporalInteraction::new(
                    &mut vs.pp(format!("interaction.level{j}")),
                    widths[j - 1],
                    cfg,
                )?),
                _ => None,
            };
            interactions.push(stage);
        }
        Ok(Self {
            backbone: Box::new(backbone),
            interactions,
        })
    }

    pub fn widths(&self) -> [usize; 4] {
        self.backbone.widths()
    }

    fn check_input(x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "encoder input must be 3-channel with sides divisible by 32, got {c}x{h}x{w}"
            )));
        }
        Ok(())
    }

    /// Single-image pyramid without interaction.
    pub fn extract_features(&self, x: &Tensor, ctx: &Ctx) -> Result<FeaturePyramid> {
        Self::check_input(x)?;
        let mut y = self.backbone.stem(x, ctx)?;
        let mut levels = Vec::with_capacity(4);
        for j in 1..=4 {
            y = self.backbone.stage(j, &y, ctx)?;
            levels.push(y.clone());
        }
        Ok(FeaturePyramid { levels })
    }

    /// Both temporal pyramids through the shared backbone, with interaction
    /// applied after each configured level before the next stage runs.
    pub fn forward_pair(&self, x1: &Tensor, x2: &Tensor, ctx: &Ctx) -> Result<(FeaturePyramid, FeaturePyramid)> {
        Self::check_input(x1)?;
        if x1.dims() != x2.dims() {
            return Err(Error::invalid(format!(
                "temporal inputs differ in shape: {:?} vs {:?}",
                x1.dims(),
                x2.dims()
            )));
        }
        let mut y1 = self.backbone.stem(x1, ctx)?;
        let mut y2 = self.backbone.stem(x2, ctx)?;
        let (mut l1, mut l2) = (Vec::with_capacity(4), Vec::with_capacity(4));
        for j in 1..=4 {
            y1 = self.backbone.stage(j, &y1, ctx)?;
            y2 = self.backbone.stage(j, &y2, ctx)?;
            if let Some(stage) = &self.interactions[j - 1] {
                (y1, y2) = stage.forward(&y1, &y2, ctx)?;
            }
            l1.push(y1.clone());
            l2.push(y2.clone());
        }
        Ok((FeaturePyramid { levels: l1 }, FeaturePyramid { levels: l2 }))
    }
}
