use candle_core::Tensor;

use super::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvInit, Scope};

/// Per-level projection of each temporal stream to a common width followed by
/// channel concatenation (pre-event channels first).
#[derive(Debug, Clone)]
pub struct Fusion {
    pre: Vec<Conv2d>,
    post: Vec<Conv2d>,
    dim: usize,
}

/// Fused levels `(B, 2C, H_j, W_j)` and, when edge clues are on, the learned
/// edge features `(B, 3, H, W)`.
#[derive(Debug, Clone)]
pub struct FusedFeatures {
    pub levels: Vec<Tensor>,
    pub z0: Option<Tensor>,
}

impl Fusion {
    pub fn new(vs: &mut Scope, widths: [usize; 4], dim: usize) -> Result<Self> {
        let mut pre = Vec::with_capacity(4);
        let mut post = Vec::with_capacity(4);
        for (j, &c) in widths.iter().enumerate() {
            let mut lv = vs.pp(format!("level{}", j + 1));
            pre.push(Conv2d::new(&mut lv.pp("pre"), c, dim, 1, 1, 0, ConvInit::Uniform)?);
            post.push(Conv2d::new(&mut lv.pp("post"), c, dim, 1, 1, 0, ConvInit::Uniform)?);
        }
        Ok(Self { pre, post, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn project_and_fuse(&self, p1: &FeaturePyramid, p2: &FeaturePyramid) -> Result<Vec<Tensor>> {
        if p1.levels.len() != 4 || p2.levels.len() != 4 {
            return Err(Error::invalid("pyramids must have four levels"));
        }
        p1.levels
            .iter()
            .zip(&p2.levels)
            .enumerate()
            .map(|(j, (a, b))| {
                if a.dims() != b.dims() {
                    return Err(Error::invalid(format!(
                        "level {} shapes differ: {:?} vs {:?}",
                        j + 1,
                        a.dims(),
                        b.dims()
                    )));
                }
                let z1 = self.pre[j].forward(a)?;
                let z2 = self.post[j].forward(b)?;
                Ok(Tensor::cat(&[z1, z2], 1)?)
            })
            .collect()
    }
}

/// 7×7 convolution turning handcrafted edge maps into learned edge features.
#[derive(Debug, Clone)]
pub struct EdgeConv(Conv2d);

impl EdgeConv {
    pub fn new(vs: &mut Scope) -> Result<Self> {
        Ok(Self(Conv2d::new(vs, 3, 3, 7, 1, 3, ConvInit::Uniform)?))
    }

    pub fn forward(&self, x0: &Tensor) -> Result<Tensor> {
        self.0.forward(x0)
    }
}
