//! Parameter storage and the handful of layers the networks are built from.
//!
//! Every layer is composed from differentiable tensor primitives, so the
//! same code runs in f32 for training and in f64 for gradient checks.
//! Parameters are initialized from a keyed ChaCha stream, never from a global
//! generator, which keeps model construction reproducible.

use std::cell::RefCell;
use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose, StreamRng};

pub struct ParamStore {
    dtype: DType,
    device: Device,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    rng: StreamRng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            rng: stream(seed, 0, 0, Purpose::Init),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    /// Trainable parameters in name order.
    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    /// Non-trainable state (normalization statistics) in name order.
    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Number of parameters whose name starts with `prefix`.
    pub fn num_params_under(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// All parameters and buffers, keyed `param/<name>` and `buffer/<name>`.
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let p = self
            .params
            .iter()
            .map(|(k, v)| (format!("param/{k}"), v.as_tensor().clone()));
        let b = self
            .buffers
            .iter()
            .map(|(k, v)| (format!("buffer/{k}"), v.as_tensor().clone()));
        p.chain(b).collect()
    }

    /// Overwrites every parameter and buffer from a state map produced by
    /// [`ParamStore::state`]. Missing or extra entries are errors.
    pub fn load_state(&self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        let expected = self.params.len() + self.buffers.len();
        if state.len() != expected {
            return Err(Error::Checkpoint(format!(
                "state holds {} tensors, model expects {expected}",
                state.len()
            )));
        }
        for (group, map) in [("param", &self.params), ("buffer", &self.buffers)] {
            for (k, var) in map {
                let key = format!("{group}/{k}");
                let t = state
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
                assign(var, t, &key)?;
            }
        }
        Ok(())
    }

    /// Loads the subset of parameters found in `weights` under `prefix`
    /// (names relative to the prefix). Returns how many were loaded.
    pub fn load_partial(&self, prefix: &str, weights: &BTreeMap<String, Tensor>) -> Result<usize> {
        let mut n = 0;
        for (name, t) in weights {
            let key = format!("{prefix}{name}");
            if let Some(var) = self.params.get(&key).or_else(|| self.buffers.get(&key)) {
                assign(var, t, &key)?;
                n += 1;
            }
        }
        Ok(n)
    }
}

fn assign(var: &Var, t: &Tensor, key: &str) -> Result<()> {
    if var.shape() != t.shape() {
        return Err(Error::Checkpoint(format!(
            "{key}: shape {:?} does not match model shape {:?}",
            t.dims(),
            var.dims()
        )));
    }
    var.set(&t.to_dtype(var.dtype())?)?;
    Ok(())
}

/// A named view into a [`ParamStore`] used while building layers.
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Scope<'_> {
    pub fn pp(&mut self, name: impl AsRef<str>) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    fn key(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, dims: &[usize]) -> Result<Tensor> {
        let key = self.key(name);
        if self.store.params.contains_key(&key) {
            return Err(Error::invalid(format!("duplicate parameter {key}")));
        }
        let t = Tensor::from_vec(values, dims, &self.store.device)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        let t = var.as_tensor().clone();
        self.store.params.insert(key, var);
        Ok(t)
    }

    pub fn uniform(&mut self, name: &str, dims: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        let values = (0..n)
            .map(|_| self.store.rng.random_range(-bound..bound))
            .collect();
        self.insert(name, values, dims)
    }

    pub fn normal(&mut self, name: &str, dims: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        let values = (0..n).map(|_| dist.sample(&mut self.store.rng)).collect();
        self.insert(name, values, dims)
    }

    pub fn constant(&mut self, name: &str, dims: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        self.insert(name, vec![value; n], dims)
    }

    pub fn buffer(&mut self, name: &str, dims: &[usize], value: f64) -> Result<Var> {
        let key = self.key(name);
        let n: usize = dims.iter().product();
        let t = Tensor::from_vec(vec![value; n], dims, &self.store.device)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.store.buffers.insert(key, var.clone());
        Ok(var)
    }
}

/// Per-forward state: training flag and the dropout stream.
pub struct Ctx {
    pub train: bool,
    dropout: RefCell<Option<StreamRng>>,
}

impl Ctx {
    pub fn eval() -> Self {
        Self {
            train: false,
            dropout: RefCell::new(None),
        }
    }

    pub fn train(seed: u64, step: u64) -> Self {
        Self {
            train: true,
            dropout: RefCell::new(Some(stream(seed, step, 0, Purpose::Dropout))),
        }
    }
}

pub fn dropout(x: &Tensor, p: f64, ctx: &Ctx) -> Result<Tensor> {
    if !ctx.train || p <= 0.0 {
        return Ok(x.clone());
    }
    let mut guard = ctx.dropout.borrow_mut();
    let rng = guard
        .as_mut()
        .ok_or_else(|| Error::invalid("training context without a dropout stream"))?;
    let keep = 1.0 - p;
    let mask: Vec<f64> = (0..x.elem_count())
        .map(|_| if rng.random_bool(keep) { 1.0 / keep } else { 0.0 })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok(x.mul(&mask)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(vs: &mut Scope, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: vs.uniform("weight", &[out_dim, in_dim], bound)?,
            bias: vs.uniform("bias", &[out_dim], bound)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(y.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

#[derive(Debug, Clone, Copy)]
pub enum ConvInit {
    /// U(±1/sqrt(fan_in)) for weight and bias.
    Uniform,
    /// N(0, 2/fan_out), no bias. Used ahead of batch normalization.
    KaimingFanOut,
}

impl Conv2d {
    pub fn new(
        vs: &mut Scope,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: ConvInit,
    ) -> Result<Self> {
        let dims = [out_c, in_c, kernel, kernel];
        let (weight, bias) = match init {
            ConvInit::Uniform => {
                let bound = 1.0 / ((in_c * kernel * kernel) as f64).sqrt();
                (
                    vs.uniform("weight", &dims, bound)?,
                    Some(vs.uniform("bias", &[out_c], bound)?),
                )
            }
            ConvInit::KaimingFanOut => {
                let std = (2.0 / (out_c * kernel * kernel) as f64).sqrt();
                (vs.normal("weight", &dims, std)?, None)
            }
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Batch normalization over dimension 1 of an `(N, C, ...)` tensor.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm {
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(vs: &mut Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: vs.constant("weight", &[channels], 1.0)?,
            bias: vs.constant("bias", &[channels], 0.0)?,
            running_mean: vs.buffer("running_mean", &[channels], 0.0)?,
            running_var: vs.buffer("running_var", &[channels], 1.0)?,
            momentum: Self::MOMENTUM,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        if dims.len() < 2 {
            return Err(Error::invalid("batch norm needs at least 2 dimensions"));
        }
        let c = dims[1];
        let mut bshape = vec![1usize; dims.len()];
        bshape[1] = c;
        let (mean, var) = if ctx.train {
            let flat = x.transpose(0, 1)?.contiguous()?.reshape((c, ()))?;
            let n = flat.dim(1)?;
            if n < 2 {
                return Err(Error::invalid("batch norm in training needs more than one value per channel"));
            }
            let mean = flat.mean_keepdim(1)?;
            let centered = flat.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim(1)?;
            let m = self.momentum;
            let unbiased = (var.detach() * (n as f64 / (n as f64 - 1.0)))?.flatten_all()?;
            self.running_mean
                .set(&((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?)?;
            self.running_var
                .set(&((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?)?;
            (mean.reshape(bshape.as_slice())?, var.reshape(bshape.as_slice())?)
        } else {
            (
                self.running_mean.as_detached_tensor().reshape(bshape.as_slice())?,
                self.running_var.as_detached_tensor().reshape(bshape.as_slice())?,
            )
        };
        let xn = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn
            .broadcast_mul(&self.weight.reshape(bshape.as_slice())?)?
            .broadcast_add(&self.bias.reshape(bshape.as_slice())?)?)
    }
}

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(vs: &mut Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: vs.constant("weight", &[dim], 1.0)?,
            bias: vs.constant("bias", &[dim], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let xn = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xn.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?;
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(dim)?)?)
}

pub fn log_softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let max = x.max_keepdim(dim)?;
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Row-stochastic `out_len × in_len` matrix for linear interpolation with
/// half-pixel alignment (sample positions clamped at the lower border).
pub fn linear_interp_matrix(in_len: usize, out_len: usize) -> Vec<f64> {
    let scale = in_len as f64 / out_len as f64;
    let mut m = vec![0.0; out_len * in_len];
    for i in 0..out_len {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let t = src - i0 as f64;
        m[i * in_len + i0] += 1.0 - t;
        m[i * in_len + i1] += t;
    }
    m
}

/// Non-overlapping `k × k` max pooling. The gradient of each window is split
/// evenly among its tied maxima, so a shift applied to all of them moves the
/// output by the same amount. (candle's fused pooling op scales the gradient
/// of a unique maximum by `1/k²`.)
pub fn max_pool2d(x: &Tensor, k: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::invalid(format!("{h}x{w} map is not divisible into {k}x{k} pools")));
    }
    let (oh, ow) = (h / k, w / k);
    let xr = x
        .reshape(vec![b, c, oh, k, ow, k])?
        .permute(vec![0, 1, 2, 4, 3, 5])?
        .reshape((b, c, oh, ow, k * k))?;
    let m = xr.detach().max_keepdim(4)?;
    let mask = xr.broadcast_eq(&m)?.to_dtype(x.dtype())?;
    let share = mask.broadcast_div(&mask.sum_keepdim(4)?)?;
    // Exactly zero in value; carries the gradient.
    let delta = ((&xr - xr.detach())? * share)?.sum(4)?;
    Ok((m.squeeze(4)? + delta)?)
}

/// Bilinear resize of the last two dimensions of a rank-4 tensor, expressed
/// as two matrix products so that it is differentiable.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let dev = x.device();
    let ay = Tensor::from_vec(linear_interp_matrix(h, out_h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let axt = Tensor::from_vec(linear_interp_matrix(w, out_w), (out_w, w), dev)?
        .to_dtype(x.dtype())?
        .t()?;
    let y = x.contiguous()?.broadcast_matmul(&axt)?;
    Ok(ay.broadcast_matmul(&y)?)
}

/// First non-finite element of a `(B, Q, ...)` tensor as `(batch, query)`.
pub fn first_non_finite(x: &Tensor) -> Result<Option<(usize, usize)>> {
    let dims = x.dims();
    let b = dims[0];
    let q = if dims.len() > 1 { dims[1] } else { 1 };
    let inner = x.elem_count() / (b * q).max(1);
    let values = x.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    Ok(values
        .iter()
        .position(|v| !v.is_finite())
        .map(|i| (i / (q * inner), (i / inner) % q)))
}
