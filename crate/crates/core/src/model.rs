//! End-to-end networks: the full cross-resolution model and the plain
//! convolutional baseline, behind one forward contract.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::coordspace::GridSpec;
use crate::decoder::{
    build_query_grid, bundle_dim, decode, gather, logits_to_map, predict_mask, upsample_scores, ChangeScoreMap,
    GatherPlan, ImplicitMlp,
};
use crate::edges::{edge_clues, CannyConfig, EdgeMap};
use crate::encoder::{level_size, BackboneKind, EdgeConv, Encoder, FusedFeatures, Fusion, InteractionConfig};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, Mask};
use crate::nn::{bilinear_resize, softmax, BatchNorm, Conv2d, ConvInit, Ctx, ParamStore, Scope};
use crate::synthesis::{prepare_inference_pair, BitemporalSample, Slot};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Sili,
    /// Siamese backbone with a three-layer convolutional head.
    Base,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub backbone: BackboneKind,
    /// Ignored by the baseline.
    pub interaction: InteractionConfig,
    /// Query-grid downsampling factor.
    pub ds: usize,
    pub edge_clues: bool,
    /// Per-stream projection width; fused width is twice this.
    pub fused_dim: usize,
    pub canny: CannyConfig,
    /// Compute training edge clues from the swapped LR image instead of the
    /// pre-swap one.
    pub edges_from_swapped: bool,
    /// Optional safetensors file with backbone weights, keyed like the
    /// backbone parameters (`conv1.weight`, `layer1.0.bn1.weight`, ...).
    pub backbone_weights: Option<PathBuf>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Sili,
            backbone: BackboneKind::Reference,
            interaction: InteractionConfig::default(),
            ds: 2,
            edge_clues: true,
            fused_dim: 64,
            canny: CannyConfig::default(),
            edges_from_swapped: false,
            backbone_weights: None,
        }
    }
}

impl ModelConfig {
    /// Tiny backbone with 4×4 windows, sized for 64×64 tiles.
    pub fn tiny(variant: Variant) -> Self {
        Self {
            variant,
            backbone: BackboneKind::Tiny,
            interaction: InteractionConfig {
                window_size: 4,
                ..InteractionConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ds == 0 {
            return Err(Error::Config("ds must be >= 1".into()));
        }
        if self.fused_dim == 0 {
            return Err(Error::Config("fused_dim must be >= 1".into()));
        }
        if self.variant == Variant::Sili {
            self.interaction.validate()?;
        }
        Ok(())
    }

    /// Whether the network consumes an edge-clue input.
    pub fn uses_edges(&self) -> bool {
        self.variant == Variant::Sili && self.edge_clues
    }

    /// Checks that an `h × w` input fits the encoder and the query grid.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::invalid(format!("input {h}x{w} must have sides divisible by 32")));
        }
        if self.variant == Variant::Sili {
            self.interaction.check_input(h, w)?;
            build_query_grid(GridSpec::new(h, w)?, self.ds)?;
        }
        Ok(())
    }
}

/// Batched network input: prepared `(B, 3, H, W)` images and, when the
/// configuration uses them, `(B, 3, H, W)` edge clues.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub pre: Tensor,
    pub post: Tensor,
    pub edges: Option<Tensor>,
}

impl ModelInput {
    pub fn hr_size(&self) -> Result<(usize, usize)> {
        let (_, _, h, w) = self.pre.dims4()?;
        Ok((h, w))
    }

    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.pre.dim(0)?)
    }

    /// Stacks prepared samples and optional edge maps.
    pub fn from_samples(samples: &[&BitemporalSample], edges: Option<&[EdgeMap]>, dtype: DType) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let dev = Device::Cpu;
        let stack = |imgs: Vec<&crate::image::ImageTensor>| -> Result<Tensor> {
            let ts = imgs
                .into_iter()
                .map(|i| i.to_chw_tensor(dtype, &dev))
                .collect::<Result<Vec<_>>>()?;
            Ok(Tensor::stack(&ts, 0)?)
        };
        for s in samples {
            if !s.is_prepared() {
                return Err(Error::invalid("samples must be prepared to a common HR size"));
            }
        }
        let pre = stack(samples.iter().map(|s| &s.pre).collect())?;
        let post = stack(samples.iter().map(|s| &s.post).collect())?;
        let edges = match edges {
            Some(e) => {
                if e.len() != samples.len() {
                    return Err(Error::invalid("edge map count does not match batch"));
                }
                Some(stack(e.iter().map(|m| m.as_image()).collect())?)
            }
            None => None,
        };
        Ok(Self { pre, post, edges })
    }
}

#[derive(Debug, Clone)]
struct BaseHead {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    conv3: Conv2d,
}

impl BaseHead {
    fn new(vs: &mut Scope, in_c: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&mut vs.pp("conv1"), in_c, 64, 3, 1, 1, ConvInit::KaimingFanOut)?,
            bn1: BatchNorm::new(&mut vs.pp("bn1"), 64)?,
            conv2: Conv2d::new(&mut vs.pp("conv2"), 64, 64, 3, 1, 1, ConvInit::KaimingFanOut)?,
            bn2: BatchNorm::new(&mut vs.pp("bn2"), 64)?,
            conv3: Conv2d::new(&mut vs.pp("conv3"), 64, 2, 3, 1, 1, ConvInit::Uniform)?,
        })
    }

    fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, ctx)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, ctx)?.relu()?;
        self.conv3.forward(&y)
    }
}

enum Net {
    Sili {
        encoder: Encoder,
        fusion: Fusion,
        edge_conv: Option<EdgeConv>,
        mlp: ImplicitMlp,
    },
    Base {
        encoder: Encoder,
        fusion: Fusion,
        head: BaseHead,
    },
}

/// Nearest-neighbour resize of the last two dimensions by index selection.
fn nearest_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let idx = |n: usize, m: usize| -> Result<Tensor> {
        let v: Vec<u32> = (0..m).map(|i| ((i * n) / m) as u32).collect();
        Ok(Tensor::from_vec(v, m, x.device())?)
    };
    Ok(x.index_select(&idx(h, out_h)?, 2)?.index_select(&idx(w, out_w)?, 3)?)
}

pub struct ChangeModel {
    cfg: ModelConfig,
    store: ParamStore,
    net: Net,
    plans: Mutex<HashMap<(usize, usize), Arc<GatherPlan>>>,
}

impl ChangeModel {
    pub fn new(cfg: ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let net = {
            let mut root = store.root();
            let interaction = (cfg.variant == Variant::Sili).then_some(&cfg.interaction);
            let encoder = Encoder::new(&mut root.pp("encoder"), cfg.backbone, interaction)?;
            let fusion = Fusion::new(&mut root.pp("fusion"), encoder.widths(), cfg.fused_dim)?;
            match cfg.variant {
                Variant::Sili => {
                    let edge_conv = if cfg.edge_clues {
                        Some(EdgeConv::new(&mut root.pp("edge_conv"))?)
                    } else {
                        None
                    };
                    let mlp = ImplicitMlp::new(
                        &mut root.pp("decoder.mlp"),
                        bundle_dim(cfg.fused_dim, cfg.edge_clues),
                    )?;
                    Net::Sili {
                        encoder,
                        fusion,
                        edge_conv,
                        mlp,
                    }
                }
                Variant::Base => {
                    let head = BaseHead::new(&mut root.pp("head"), 4 * 2 * cfg.fused_dim)?;
                    Net::Base { encoder, fusion, head }
                }
            }
        };
        if let Some(path) = &cfg.backbone_weights {
            let weights = candle_core::safetensors::load(path, &Device::Cpu)?;
            let weights = weights.into_iter().collect();
            let n = store.load_partial("encoder.backbone.", &weights)?;
            log::info!("loaded {n} backbone tensors from {}", path.display());
        }
        Ok(Self {
            cfg,
            store,
            net,
            plans: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    fn plan(&self, h: usize, w: usize) -> Result<Arc<GatherPlan>> {
        let mut plans = self.plans.lock().map_err(|_| Error::invalid("gather plan cache poisoned"))?;
        if let Some(p) = plans.get(&(h, w)) {
            return Ok(Arc::clone(p));
        }
        let hr = GridSpec::new(h, w)?;
        let query = build_query_grid(hr, self.cfg.ds)?;
        let levels = (1..=4)
            .map(|j| {
                let (hj, wj) = level_size(h, w, j);
                GridSpec::new(hj, wj)
            })
            .collect::<Result<Vec<_>>>()?;
        let plan = Arc::new(GatherPlan::new(query, hr, &levels)?);
        plans.insert((h, w), Arc::clone(&plan));
        Ok(plan)
    }

    fn check(&self, input: &ModelInput) -> Result<()> {
        if input.pre.dims() != input.post.dims() {
            return Err(Error::invalid(format!(
                "temporal inputs differ in shape: {:?} vs {:?}",
                input.pre.dims(),
                input.post.dims()
            )));
        }
        let (h, w) = input.hr_size()?;
        self.cfg.check_input(h, w)?;
        if self.cfg.uses_edges() {
            match &input.edges {
                Some(e) if e.dims() == input.pre.dims() => {}
                Some(e) => {
                    return Err(Error::invalid(format!(
                        "edge clues {:?} do not match images {:?}",
                        e.dims(),
                        input.pre.dims()
                    )))
                }
                None => return Err(Error::invalid("configuration uses edge clues but none were given")),
            }
        }
        Ok(())
    }

    /// Coarse change logits `(B, 2, h, w)`: the query grid for the full
    /// model, the level-1 grid for the baseline.
    pub fn logits(&self, input: &ModelInput, ctx: &Ctx) -> Result<Tensor> {
        self.check(input)?;
        let (h, w) = input.hr_size()?;
        match &self.net {
            Net::Sili {
                encoder,
                fusion,
                edge_conv,
                mlp,
            } => {
                let (p1, p2) = encoder.forward_pair(&input.pre, &input.post, ctx)?;
                let levels = fusion.project_and_fuse(&p1, &p2)?;
                let z0 = match (edge_conv, &input.edges) {
                    (Some(conv), Some(e)) => Some(conv.forward(e)?),
                    _ => None,
                };
                let plan = self.plan(h, w)?;
                let bundles = gather(&plan, &FusedFeatures { levels, z0 })?;
                let logits = decode(mlp, &bundles, ctx)?;
                logits_to_map(&logits, plan.query.grid)
            }
            Net::Base { encoder, fusion, head } => {
                let p1 = encoder.extract_features(&input.pre, ctx)?;
                let p2 = encoder.extract_features(&input.post, ctx)?;
                let levels = fusion.project_and_fuse(&p1, &p2)?;
                let (_, _, h1, w1) = levels[0].dims4()?;
                let aligned = levels
                    .iter()
                    .map(|z| nearest_resize(z, h1, w1))
                    .collect::<Result<Vec<_>>>()?;
                head.forward(&Tensor::cat(&aligned, 1)?, ctx)
            }
        }
    }

    /// Logits bilinearly resized to the HR grid; the training target.
    pub fn hr_logits(&self, input: &ModelInput, ctx: &Ctx) -> Result<Tensor> {
        let (h, w) = input.hr_size()?;
        bilinear_resize(&self.logits(input, ctx)?, h, w)
    }

    /// Normalized HR score map in evaluation mode.
    pub fn scores(&self, input: &ModelInput) -> Result<ChangeScoreMap> {
        let (h, w) = input.hr_size()?;
        let logits = self.logits(input, &Ctx::eval())?;
        let coarse = ChangeScoreMap {
            probs: softmax(&logits, 1)?,
        };
        upsample_scores(&coarse, h, w)
    }

    pub fn predict(&self, input: &ModelInput) -> Result<Vec<Mask>> {
        predict_mask(&self.scores(input)?)
    }

    /// Change mask for one raw pair. The smaller image is the degraded
    /// observation; `ratio` defaults to the ratio of the image heights.
    pub fn predict_pair(&self, pre: &ImageTensor, post: &ImageTensor, ratio: Option<f64>) -> Result<Mask> {
        let (hr, lr, slot) = if pre.height() >= post.height() {
            (pre, post, Slot::Post)
        } else {
            (post, pre, Slot::Pre)
        };
        if lr.height() == 0 || lr.width() == 0 {
            return Err(Error::invalid("empty image"));
        }
        self.cfg.check_input(hr.height(), hr.width())?;
        let r = ratio.unwrap_or(hr.height() as f64 / lr.height() as f64);
        let label = Mask::zeros(hr.height(), hr.width())?;
        let sample = BitemporalSample::new(pre.clone(), post.clone(), label, r)?;
        let input = self.inference_input(&[sample], slot)?;
        Ok(self.predict(&input)?.remove(0))
    }

    /// Inference input for raw samples: upsamples the degraded slot and
    /// computes edge clues when the configuration uses them.
    pub fn inference_input(&self, samples: &[BitemporalSample], degraded: Slot) -> Result<ModelInput> {
        let prepared = samples
            .iter()
            .map(|s| prepare_inference_pair(s, degraded))
            .collect::<Result<Vec<_>>>()?;
        let edges = if self.cfg.uses_edges() {
            Some(
                prepared
                    .iter()
                    .map(|s| edge_clues(&s.pre, &s.post, &self.cfg.canny))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let refs: Vec<&BitemporalSample> = prepared.iter().collect();
        ModelInput::from_samples(&refs, edges.as_deref(), self.dtype())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Instant;

    fn sample(seed: u32, size: usize) -> BitemporalSample {
        let f = |k: u32| {
            ImageTensor::from_fn(size, size, 3, move |y, x, c| {
                let v = (y * 31 + x * 17 + c * 7 + (k * 13) as usize) % 97;
                v as f32 / 96.0
            })
            .unwrap()
        };
        let mut label = Mask::zeros(size, size).unwrap();
        label.set(3, 4, true);
        BitemporalSample::new(f(seed), f(seed + 1), label, 1.0).unwrap()
    }

    #[test]
    fn output_shape_and_normalization() {
        for variant in [Variant::Sili, Variant::Base] {
            let model = ChangeModel::new(ModelConfig::tiny(variant), DType::F32, 1).unwrap();
            let input = model.inference_input(&[sample(0, 64), sample(5, 64)], Slot::Post).unwrap();
            let s = model.scores(&input).unwrap();
            assert_eq!(s.dims().unwrap(), (2, 2, 64, 64));
            let sums = s.probs.sum(1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(sums.iter().all(|v| (v - 1.0).abs() < 1e-6));
            let masks = model.predict(&input).unwrap();
            assert_eq!(masks.len(), 2);
            assert_eq!((masks[0].height(), masks[0].width()), (64, 64));
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let a = ChangeModel::new(ModelConfig::tiny(Variant::Sili), DType::F32, 9).unwrap();
        let b = ChangeModel::new(ModelConfig::tiny(Variant::Sili), DType::F32, 9).unwrap();
        let input = a.inference_input(&[sample(2, 64)], Slot::Post).unwrap();
        let x = a.logits(&input, &Ctx::eval()).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let y = a.logits(&input, &Ctx::eval()).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let z = b.logits(&input, &Ctx::eval()).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(x, y);
        assert_eq!(x, z);
    }

    #[test]
    fn mismatched_temporals_rejected() {
        let model = ChangeModel::new(ModelConfig::tiny(Variant::Sili), DType::F32, 1).unwrap();
        let input = model.inference_input(&[sample(0, 64)], Slot::Post).unwrap();
        let bad = ModelInput {
            post: input.post.narrow(2, 0, 32).unwrap(),
            ..input.clone()
        };
        assert!(matches!(model.logits(&bad, &Ctx::eval()), Err(Error::InvalidArgument(_))));
        let no_edges = ModelInput { edges: None, ..input };
        assert!(model.logits(&no_edges, &Ctx::eval()).is_err());
    }

    #[test]
    fn parameter_counts_are_stable() {
        let count = |cfg: ModelConfig| ChangeModel::new(cfg, DType::F32, 0).unwrap().num_params();
        assert_eq!(count(ModelConfig::tiny(Variant::Sili)), TINY_SILI_PARAMS);
        assert_eq!(count(ModelConfig::tiny(Variant::Base)), TINY_BASE_PARAMS);
        assert_eq!(count(ModelConfig::default()), REFERENCE_SILI_PARAMS);
        assert_eq!(
            count(ModelConfig {
                variant: Variant::Base,
                ..ModelConfig::default()
            }),
            REFERENCE_BASE_PARAMS
        );
    }

    const TINY_SILI_PARAMS: usize = 157_502;
    const TINY_BASE_PARAMS: usize = 427_370;
    const REFERENCE_SILI_PARAMS: usize = 12_439_934;
    const REFERENCE_BASE_PARAMS: usize = 11_633_090;

    #[test]
    fn reference_backbone_matches_resnet18_without_classifier() {
        // 11,689,512 total for the ImageNet network minus the 512·1000 + 1000
        // classifier.
        let m = ChangeModel::new(ModelConfig::default(), DType::F32, 0).unwrap();
        assert_eq!(m.store().num_params_under("encoder.backbone."), 11_689_512 - 513_000);
    }

    #[test]
    fn tiny_forward_under_a_second() {
        let model = ChangeModel::new(ModelConfig::tiny(Variant::Sili), DType::F32, 1).unwrap();
        let input = model.inference_input(&[sample(0, 64)], Slot::Post).unwrap();
        model.scores(&input).unwrap();
        let t = Instant::now();
        model.scores(&input).unwrap();
        assert!(t.elapsed().as_secs_f64() < 1.0, "forward took {:?}", t.elapsed());
    }

    #[test]
    fn nearest_resize_repeats_cells() {
        let x = Tensor::arange(0f32, 4.0, &Device::Cpu).unwrap().reshape((1, 1, 2, 2)).unwrap();
        let y = nearest_resize(&x, 4, 4).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(y, vec![0., 0., 1., 1., 0., 0., 1., 1., 2., 2., 3., 3., 2., 2., 3., 3.]);
    }
}
