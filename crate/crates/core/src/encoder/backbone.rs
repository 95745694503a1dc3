//! Residual convolutional backbones producing four feature levels at strides
//! 4, 8, 16 and 32.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{max_pool2d, BatchNorm, Conv2d, ConvInit, Ctx, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    /// 18-layer residual network, widths 64/128/256/512.
    #[default]
    Reference,
    /// One block per stage, widths 8/16/32/64. For tests and desk-scale runs.
    Tiny,
}

impl BackboneKind {
    pub fn widths(self) -> [usize; 4] {
        match self {
            BackboneKind::Reference => [64, 128, 256, 512],
            BackboneKind::Tiny => [8, 16, 32, 64],
        }
    }

    pub fn blocks(self) -> [usize; 4] {
        match self {
            BackboneKind::Reference => [2, 2, 2, 2],
            BackboneKind::Tiny => [1, 1, 1, 1],
        }
    }
}

/// A staged feature extractor. Level `j` (1-based) has stride `2^(j+1)`.
pub trait Backbone: Send + Sync {
    fn widths(&self) -> [usize; 4];
    fn stem(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor>;
    fn stage(&self, level: usize, x: &Tensor, ctx: &Ctx) -> Result<Tensor>;
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    downsample: Option<(Conv2d, BatchNorm)>,
}

impl BasicBlock {
    fn new(vs: &mut Scope, in_c: usize, out_c: usize, stride: usize) -> Result<Self> {
        let conv1 = Conv2d::new(&mut vs.pp("conv1"), in_c, out_c, 3, stride, 1, ConvInit::KaimingFanOut)?;
        let bn1 = BatchNorm::new(&mut vs.pp("bn1"), out_c)?;
        let conv2 = Conv2d::new(&mut vs.pp("conv2"), out_c, out_c, 3, 1, 1, ConvInit::KaimingFanOut)?;
        let bn2 = BatchNorm::new(&mut vs.pp("bn2"), out_c)?;
        let downsample = if stride != 1 || in_c != out_c {
            let mut ds = vs.pp("downsample");
            Some((
                Conv2d::new(&mut ds.pp("0"), in_c, out_c, 1, stride, 0, ConvInit::KaimingFanOut)?,
                BatchNorm::new(&mut ds.pp("1"), out_c)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, ctx)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, ctx)?;
        let shortcut = match &self.downsample {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, ctx)?,
            None => x.clone(),
        };
        Ok((y + shortcut)?.relu()?)
    }
}

#[derive(Debug, Clone)]
pub struct ResNet {
    widths: [usize; 4],
    conv1: Conv2d,
    bn1: BatchNorm,
    stages: Vec<Vec<BasicBlock>>,
}

impl ResNet {
    pub fn new(vs: &mut Scope, kind: BackboneKind) -> Result<Self> {
        let widths = kind.widths();
        let conv1 = Conv2d::new(&mut vs.pp("conv1"), 3, widths[0], 7, 2, 3, ConvInit::KaimingFanOut)?;
        let bn1 = BatchNorm::new(&mut vs.pp("bn1"), widths[0])?;
        let mut stages = Vec::with_capacity(4);
        let mut in_c = widths[0];
        for (j, (&out_c, &n)) in widths.iter().zip(kind.blocks().iter()).enumerate() {
            let mut layer = vs.pp(format!("layer{}", j + 1));
            let mut blocks = Vec::with_capacity(n);
            for b in 0..n {
                let stride = if j > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(&mut layer.pp(b.to_string()), in_c, out_c, stride)?);
                in_c = out_c;
            }
            stages.push(blocks);
        }
        Ok(Self {
            widths,
            conv1,
            bn1,
            stages,
        })
    }
}

impl Backbone for ResNet {
    fn widths(&self) -> [usize; 4] {
        self.widths
    }

    fn stem(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, ctx)?.relu()?;
        max_pool2d(&y, 2)
    }

    fn stage(&self, level: usize, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let mut y = x.clone();
        for block in &self.stages[level - 1] {
            y = block.forward(&y, ctx)?;
        }
        Ok(y)
    }
}
