//! Bitemporal local interaction: joint self-attention over the tokens of both
//! temporal feature maps inside each non-overlapping window.

use candle_core::{Tensor, D};

use super::window::{merge_windows, partition_windows};
use super::{InteractionConfig, InteractionMode};
use crate::error::{Error, Result};
use crate::nn::{dropout, softmax, Ctx, LayerNorm, Linear, Scope};

#[derive(Debug, Clone)]
struct MultiHeadAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    fn new(vs: &mut Scope, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            qkv: Linear::new(&mut vs.pp("qkv"), dim, 3 * dim)?,
            proj: Linear::new(&mut vs.pp("proj"), dim, dim)?,
            heads,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, t, c) = x.dims3()?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((n, t, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?;
        let attn = softmax(&scores, 3)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((n, t, c))?;
        self.proj.forward(&out)
    }
}

#[derive(Debug, Clone)]
struct TransformerLayer {
    norm1: LayerNorm,
    attn: MultiHeadAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    dropout: f64,
}

impl TransformerLayer {
    fn new(vs: &mut Scope, dim: usize, cfg: &InteractionConfig) -> Result<Self> {
        let hidden = dim * cfg.mlp_ratio;
        Ok(Self {
            norm1: LayerNorm::new(&mut vs.pp("norm1"), dim)?,
            attn: MultiHeadAttention::new(&mut vs.pp("attn"), dim, cfg.heads)?,
            norm2: LayerNorm::new(&mut vs.pp("norm2"), dim)?,
            fc1: Linear::new(&mut vs.pp("mlp.fc1"), dim, hidden)?,
            fc2: Linear::new(&mut vs.pp("mlp.fc2"), hidden, dim)?,
            dropout: cfg.dropout,
        })
    }

    /// Pre-norm residual layer. The positional embedding enters only the
    /// attention branch input, so the residual stream carries the features.
    fn forward(&self, x: &Tensor, pos: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let a = self.norm1.forward(x)?.broadcast_add(pos)?;
        let a = dropout(&a, self.dropout, ctx)?;
        let x = (x + dropout(&self.attn.forward(&a)?, self.dropout, ctx)?)?;
        let m = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.relu()?)?;
        Ok((&x + dropout(&m, self.dropout, ctx)?)?)
    }
}

/// One interaction stage for one feature level.
#[derive(Debug, Clone)]
pub struct BitemporalInteraction {
    mode: InteractionMode,
    window: usize,
    /// `(2·WS², C)` in windowed mode: temporal slot major, then row-major
    /// position inside the window. `(2, C)` in non-local mode.
    pos_embed: Tensor,
    layers: Vec<TransformerLayer>,
}

impl BitemporalInteraction {
    pub fn new(vs: &mut Scope, dim: usize, cfg: &InteractionConfig) -> Result<Self> {
        if cfg.heads == 0 || dim % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "channel width {dim} is not divisible by {} heads",
                cfg.heads
            )));
        }
        let tokens = match cfg.mode {
            InteractionMode::Windowed => 2 * cfg.window_size * cfg.window_size,
            InteractionMode::NonLocal => 2,
        };
        let pos_embed = vs.normal("pos_embed", &[tokens, dim], 0.02)?;
        let layers = (0..cfg.n_layers)
            .map(|i| TransformerLayer::new(&mut vs.pp(format!("layers.{i}")), dim, cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mode: cfg.mode,
            window: cfg.window_size,
            pos_embed,
            layers,
        })
    }

    pub fn forward(&self, f1: &Tensor, f2: &Tensor, ctx: &Ctx) -> Result<(Tensor, Tensor)> {
        if f1.dims() != f2.dims() {
            return Err(Error::invalid(format!(
                "bitemporal features differ in shape: {:?} vs {:?}",
                f1.dims(),
                f2.dims()
            )));
        }
        let (_, c, h, w) = f1.dims4()?;
        let (wh, ww) = match self.mode {
            InteractionMode::Windowed => (self.window, self.window),
            InteractionMode::NonLocal => (h, w),
        };
        let t1 = partition_windows(f1, wh, ww)?;
        let t2 = partition_windows(f2, wh, ww)?;
        let t = wh * ww;
        let pos = match self.mode {
            InteractionMode::Windowed => self.pos_embed.unsqueeze(0)?,
            InteractionMode::NonLocal => {
                let slot0 = self.pos_embed.get(0)?.unsqueeze(0)?.broadcast_as((t, c))?;
                let slot1 = self.pos_embed.get(1)?.unsqueeze(0)?.broadcast_as((t, c))?;
                Tensor::cat(&[slot0, slot1], 0)?.unsqueeze(0)?
            }
        };
        let mut x = Tensor::cat(&[t1, t2], 1)?;
        for layer in &self.layers {
            x = layer.forward(&x, &pos, ctx)?;
        }
        let o1 = x.narrow(D::Minus2, 0, t)?.contiguous()?;
        let o2 = x.narrow(D::Minus2, t, t)?.contiguous()?;
        Ok((merge_windows(&o1, h, w, wh, ww)?, merge_windows(&o2, h, w, wh, ww)?))
    }
}
