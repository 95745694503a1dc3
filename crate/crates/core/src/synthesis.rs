//! Random resolution image synthesis.
//!
//! Training pairs are built in three steps: the LR image is upsampled to the
//! HR grid, the HR image is degraded by a random down/up reconstruction, and a
//! random square region is exchanged between the two. Inference applies only
//! the first step.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, Mask};

/// Keys cubic convolution parameter.
const CUBIC_A: f64 = -0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Pre,
    #[default]
    Post,
}

/// A co-registered pair. `pre` and `post` may differ in size until the pair
/// has been prepared; `label` is always at HR size.
#[derive(Debug, Clone)]
pub struct BitemporalSample {
    pub pre: ImageTensor,
    pub post: ImageTensor,
    pub label: Arc<Mask>,
    pub ratio: f64,
}

impl BitemporalSample {
    pub fn new(pre: ImageTensor, post: ImageTensor, label: Mask, ratio: f64) -> Result<Self> {
        if !(ratio >= 1.0) {
            return Err(Error::invalid(format!("resolution ratio must be >= 1, got {ratio}")));
        }
        Ok(Self {
            pre,
            post,
            label: Arc::new(label),
            ratio,
        })
    }

    pub fn slot(&self, slot: Slot) -> &ImageTensor {
        match slot {
            Slot::Pre => &self.pre,
            Slot::Post => &self.post,
        }
    }

    pub fn is_prepared(&self) -> bool {
        self.pre.height() == self.post.height()
            && self.pre.width() == self.post.width()
            && self.pre.height() == self.label.height()
            && self.pre.width() == self.label.width()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    /// Resolution difference ratio of the training data.
    pub r_d: f64,
    /// Side of the swapped square in pixels; 0 disables the swap.
    pub crop_size: usize,
    /// Random downsampled reconstruction and region swap. When off, training
    /// pairs only get the LR upsampling step.
    pub random_resolution: bool,
    pub flip_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma_min: f64,
    pub blur_sigma_max: f64,
    pub degraded_slot: Slot,
    pub seed: u64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            r_d: 4.0,
            crop_size: 128,
            random_resolution: true,
            flip_prob: 0.5,
            blur_prob: 0.5,
            blur_sigma_min: 0.1,
            blur_sigma_max: 1.5,
            degraded_slot: Slot::Post,
            seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_d >= 1.0) || !self.r_d.is_finite() {
            return Err(Error::Config(format!("r_d must be >= 1, got {}", self.r_d)));
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("blur_prob", self.blur_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(self.blur_sigma_min >= 0.0 && self.blur_sigma_min <= self.blur_sigma_max) {
            return Err(Error::Config(format!(
                "blur sigma range [{}, {}] is invalid",
                self.blur_sigma_min, self.blur_sigma_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwapRegion {
    /// Column of the upper-left corner.
    pub u: usize,
    /// Row of the upper-left corner.
    pub v: usize,
    pub crop_size: usize,
}

fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((CUBIC_A * x - 5.0 * CUBIC_A) * x + 8.0 * CUBIC_A) * x - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// Four taps per output position with border replication.
fn axis_taps(in_len: usize, out_len: usize) -> Vec<([usize; 4], [f64; 4])> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = (i as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let t = src - base;
            let mut idx = [0usize; 4];
            let mut w = [cubic(t + 1.0), cubic(t), cubic(1.0 - t), cubic(2.0 - t)];
            let norm: f64 = w.iter().sum();
            for k in 0..4 {
                let p = base as i64 - 1 + k as i64;
                idx[k] = p.clamp(0, in_len as i64 - 1) as usize;
                w[k] /= norm;
            }
            (idx, w)
        })
        .collect()
}

/// Separable bicubic resampling with half-pixel-center alignment, clamped to
/// `[0, 1]`.
pub fn resample(img: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(format!(
            "resample target must be positive, got {out_h}x{out_w}"
        )));
    }
    let (h, w, c) = img.dims();
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let src = img.data();

    let xtaps = axis_taps(w, out_w);
    let mut horiz = vec![0.0f64; h * out_w * c];
    for y in 0..h {
        for (x, (idx, wt)) in xtaps.iter().enumerate() {
            for ch in 0..c {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += wt[k] * src[(y * w + idx[k]) * c + ch] as f64;
                }
                horiz[(y * out_w + x) * c + ch] = acc;
            }
        }
    }

    let ytaps = axis_taps(h, out_h);
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for (idx, wt) in &ytaps {
        for x in 0..out_w {
            for ch in 0..c {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += wt[k] * horiz[(idx[k] * out_w + x) * c + ch];
                }
                out.push(acc.clamp(0.0, 1.0) as f32);
            }
        }
    }
    ImageTensor::new(out_h, out_w, c, out)
}

pub fn scaled_size(len: usize, factor: f64) -> usize {
    ((len as f64 * factor).round() as usize).max(1)
}

/// Upsamples an LR image by `r_d` on both axes.
pub fn upsample_lr(lr: &ImageTensor, r_d: f64) -> Result<ImageTensor> {
    if !(r_d >= 1.0) {
        return Err(Error::invalid(format!("r_d must be >= 1, got {r_d}")));
    }
    resample(lr, scaled_size(lr.height(), r_d), scaled_size(lr.width(), r_d))
}

/// Upsamples `lr` onto an HR grid of known size, checking that the sizes are
/// consistent with `r_d` to within one LR pixel.
pub fn upsample_to(lr: &ImageTensor, hr_h: usize, hr_w: usize, r_d: f64) -> Result<ImageTensor> {
    let ok = |lr_len: usize, hr_len: usize| (lr_len as f64 * r_d - hr_len as f64).abs() <= r_d;
    if !ok(lr.height(), hr_h) || !ok(lr.width(), hr_w) {
        return Err(Error::Config(format!(
            "LR image {}x{} at ratio {r_d} does not match HR size {hr_h}x{hr_w}",
            lr.height(),
            lr.width()
        )));
    }
    resample(lr, hr_h, hr_w)
}

/// Size of the intermediate LR grid for a side of `len` at `ratio`.
pub fn lr_size(len: usize, ratio: f64) -> usize {
    scaled_size(len, 1.0 / ratio)
}

/// Bicubic downsampling to `size / ratio`.
pub fn downsample(img: &ImageTensor, ratio: f64) -> Result<ImageTensor> {
    if !(ratio >= 1.0) {
        return Err(Error::invalid(format!("ratio must be >= 1, got {ratio}")));
    }
    resample(img, lr_size(img.height(), ratio), lr_size(img.width(), ratio))
}

/// Degrades `img` to `size / ratio` and restores the original size.
pub fn degrade(img: &ImageTensor, ratio: f64) -> Result<ImageTensor> {
    let (h, w, _) = img.dims();
    let lr = downsample(img, ratio)?;
    if lr.dims() == img.dims() {
        return Ok(img.clone());
    }
    resample(&lr, h, w)
}

/// Draws `r ~ U[1, r_d]` and returns the down/up reconstruction at ratio `r`.
pub fn random_downsample_reconstruct<R: Rng + ?Sized>(
    hr: &ImageTensor,
    r_d: f64,
    rng: &mut R,
) -> Result<(ImageTensor, f64)> {
    if !(r_d >= 1.0) {
        return Err(Error::invalid(format!("r_d must be >= 1, got {r_d}")));
    }
    let r = if r_d == 1.0 {
        1.0
    } else {
        rng.random_range(1.0..=r_d)
    };
    Ok((degrade(hr, r)?, r))
}

/// Exchanges the region's block between `a` and `b` in place.
pub fn apply_swap(a: &mut ImageTensor, b: &mut ImageTensor, region: SwapRegion) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::invalid(format!(
            "swap operands differ in shape: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let (h, w, c) = a.dims();
    let SwapRegion { u, v, crop_size } = region;
    if u + crop_size > w || v + crop_size > h {
        return Err(Error::invalid(format!(
            "swap region {crop_size} at ({u}, {v}) exceeds {h}x{w}"
        )));
    }
    let (ad, bd) = (a.data_mut(), b.data_mut());
    for y in v..v + crop_size {
        let start = (y * w + u) * c;
        let end = start + crop_size * c;
        ad[start..end].swap_with_slice(&mut bd[start..end]);
    }
    Ok(())
}

pub fn random_region_swap<R: Rng + ?Sized>(
    a: &ImageTensor,
    b: &ImageTensor,
    crop_size: usize,
    rng: &mut R,
) -> Result<(ImageTensor, ImageTensor, SwapRegion)> {
    let (h, w, _) = a.dims();
    if crop_size == 0 || crop_size > h || crop_size > w {
        return Err(Error::invalid(format!(
            "crop size {crop_size} does not fit a {h}x{w} image"
        )));
    }
    let u = rng.random_range(0..=w - crop_size);
    let v = rng.random_range(0..=h - crop_size);
    let region = SwapRegion { u, v, crop_size };
    let (mut a2, mut b2) = (a.clone(), b.clone());
    apply_swap(&mut a2, &mut b2, region)?;
    Ok((a2, b2, region))
}

/// Random decisions made while synthesizing one training pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthesisDecisions {
    pub r: f64,
    pub swap: Option<SwapRegion>,
}

#[derive(Debug, Clone)]
pub struct SynthesizedPair {
    /// Swapped HR-sized pair with the label passed through.
    pub sample: BitemporalSample,
    /// The upsampled LR image before the swap.
    pub lr_upsampled: ImageTensor,
    pub decisions: SynthesisDecisions,
}

fn split_slots(sample: &BitemporalSample, degraded: Slot) -> (&ImageTensor, &ImageTensor) {
    match degraded {
        Slot::Post => (&sample.pre, &sample.post),
        Slot::Pre => (&sample.post, &sample.pre),
    }
}

fn join_slots(hr: ImageTensor, lr: ImageTensor, degraded: Slot) -> (ImageTensor, ImageTensor) {
    match degraded {
        Slot::Post => (hr, lr),
        Slot::Pre => (lr, hr),
    }
}

/// Upsamples the degraded slot onto the HR grid. No randomness. A slot that
/// is already HR-sized is passed through.
pub fn prepare_inference_pair(sample: &BitemporalSample, degraded: Slot) -> Result<BitemporalSample> {
    let (hr, lr) = split_slots(sample, degraded);
    let lr_u = if lr.dims() == hr.dims() {
        lr.clone()
    } else {
        upsample_to(lr, hr.height(), hr.width(), sample.ratio)?
    };
    let (pre, post) = join_slots(hr.clone(), lr_u, degraded);
    let out = BitemporalSample {
        pre,
        post,
        label: Arc::clone(&sample.label),
        ratio: sample.ratio,
    };
    if !out.is_prepared() {
        return Err(Error::Config(format!(
            "label {}x{} does not match image {}x{}",
            out.label.height(),
            out.label.width(),
            out.pre.height(),
            out.pre.width()
        )));
    }
    Ok(out)
}

pub fn synthesize_training_pair<R: Rng + ?Sized>(
    sample: &BitemporalSample,
    cfg: &SynthesisConfig,
    rng: &mut R,
) -> Result<SynthesizedPair> {
    let prepared = prepare_inference_pair(sample, cfg.degraded_slot)?;
    let (hr, lr_u) = split_slots(&prepared, cfg.degraded_slot);
    let (hr, lr_u) = (hr.clone(), lr_u.clone());
    if !cfg.random_resolution {
        return Ok(SynthesizedPair {
            sample: prepared,
            lr_upsampled: lr_u,
            decisions: SynthesisDecisions { r: 1.0, swap: None },
        });
    }

    let (hr_d, r) = random_downsample_reconstruct(&hr, sample.ratio, rng)?;
    let (hr_s, lr_s, swap) = if cfg.crop_size > 0 {
        let (a, b, region) = random_region_swap(&hr_d, &lr_u, cfg.crop_size, rng)?;
        (a, b, Some(region))
    } else {
        (hr_d, lr_u.clone(), None)
    };
    let (pre, post) = join_slots(hr_s, lr_s, cfg.degraded_slot);
    Ok(SynthesizedPair {
        sample: BitemporalSample {
            pre,
            post,
            label: prepared.label,
            ratio: sample.ratio,
        },
        lr_upsampled: lr_u,
        decisions: SynthesisDecisions { r, swap },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugmentDecisions {
    pub hflip: bool,
    pub vflip: bool,
    pub blur_pre: Option<f64>,
    pub blur_post: Option<f64>,
}

pub fn draw_augment<R: Rng + ?Sized>(cfg: &SynthesisConfig, rng: &mut R) -> AugmentDecisions {
    let sigma = |rng: &mut R| {
        rng.random_bool(cfg.blur_prob).then(|| {
            if cfg.blur_sigma_max > cfg.blur_sigma_min {
                rng.random_range(cfg.blur_sigma_min..=cfg.blur_sigma_max)
            } else {
                cfg.blur_sigma_min
            }
        })
    };
    let hflip = rng.random_bool(cfg.flip_prob);
    let vflip = rng.random_bool(cfg.flip_prob);
    let blur_pre = sigma(rng);
    let blur_post = sigma(rng);
    AugmentDecisions {
        hflip,
        vflip,
        blur_pre,
        blur_post,
    }
}

/// Flips act on both images and the label; blur acts on the images only.
pub fn apply_augment(sample: &BitemporalSample, d: &AugmentDecisions) -> Result<BitemporalSample> {
    let geo = |img: &ImageTensor| {
        let mut img = img.clone();
        if d.hflip {
            img = img.flip_horizontal();
        }
        if d.vflip {
            img = img.flip_vertical();
        }
        img
    };
    let mut label = (*sample.label).clone();
    if d.hflip {
        label = label.flip_horizontal();
    }
    if d.vflip {
        label = label.flip_vertical();
    }
    let mut pre = geo(&sample.pre);
    let mut post = geo(&sample.post);
    if let Some(s) = d.blur_pre {
        pre = gaussian_blur(&pre, s)?;
    }
    if let Some(s) = d.blur_post {
        post = gaussian_blur(&post, s)?;
    }
    Ok(BitemporalSample {
        pre,
        post,
        label: if d.hflip || d.vflip {
            Arc::new(label)
        } else {
            Arc::clone(&sample.label)
        },
        ratio: sample.ratio,
    })
}

pub fn augment<R: Rng + ?Sized>(
    sample: &BitemporalSample,
    cfg: &SynthesisConfig,
    rng: &mut R,
) -> Result<BitemporalSample> {
    let d = draw_augment(cfg, rng);
    apply_augment(sample, &d)
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with border replication; kernel radius `ceil(3σ)`.
pub fn gaussian_blur(img: &ImageTensor, sigma: f64) -> Result<ImageTensor> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("blur sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let (h, w, c) = img.dims();
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let src = img.data();
    let mut tmp = vec![0.0f64; h * w * c];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let xx = (x as i64 + j as i64 - r).clamp(0, w as i64 - 1) as usize;
                    acc += kv * src[(y * w + xx) * c + ch] as f64;
                }
                tmp[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let yy = (y as i64 + j as i64 - r).clamp(0, h as i64 - 1) as usize;
                    acc += kv * tmp[(yy * w + x) * c + ch];
                }
                out.push(acc.clamp(0.0, 1.0) as f32);
            }
        }
    }
    ImageTensor::new(h, w, c, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};
    use proptest::prelude::*;
    use rand::Rng;

    fn noise(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = stream(seed, 0, 0, Purpose::Fixture);
        ImageTensor::from_fn(h, w, 3, |_, _, _| rng.random::<f32>()).unwrap()
    }

    /// Direct evaluation of the Keys kernel at the sample position of every
    /// output pixel, written independently of the separable implementation.
    fn bicubic_oracle(img: &ImageTensor, oh: usize, ow: usize, y: usize, x: usize, c: usize) -> f64 {
        let (h, w, _) = img.dims();
        let sy = (y as f64 + 0.5) * h as f64 / oh as f64 - 0.5;
        let sx = (x as f64 + 0.5) * w as f64 / ow as f64 - 0.5;
        let kernel = |d: f64| {
            let a = -0.5;
            let d = d.abs();
            if d <= 1.0 {
                (a + 2.0) * d.powi(3) - (a + 3.0) * d.powi(2) + 1.0
            } else if d < 2.0 {
                a * d.powi(3) - 5.0 * a * d.powi(2) + 8.0 * a * d - 4.0 * a
            } else {
                0.0
            }
        };
        let mut acc = 0.0;
        let mut norm = 0.0;
        for py in (sy.floor() as i64 - 1)..=(sy.floor() as i64 + 2) {
            for px in (sx.floor() as i64 - 1)..=(sx.floor() as i64 + 2) {
                let wgt = kernel(sy - py as f64) * kernel(sx - px as f64);
                let cy = py.clamp(0, h as i64 - 1) as usize;
                let cx = px.clamp(0, w as i64 - 1) as usize;
                acc += wgt * img.get(cy, cx, c) as f64;
                norm += wgt;
            }
        }
        (acc / norm).clamp(0.0, 1.0)
    }

    #[test]
    fn resample_identity_and_constant() {
        let img = noise(9, 7, 1);
        assert_eq!(resample(&img, 9, 7).unwrap(), img);
        let c = ImageTensor::filled(10, 12, 3, 0.5).unwrap();
        for (h, w) in [(3, 4), (17, 23), (10, 5)] {
            let r = resample(&c, h, w).unwrap();
            assert!(r.data().iter().all(|v| (v - 0.5).abs() < 1e-6));
        }
    }

    #[test]
    fn resample_ramp_matches_kernel_oracle() {
        let ramp = ImageTensor::from_fn(4, 4, 3, |y, x, c| (y * 4 + x) as f32 / 16.0 + c as f32 * 0.01)
            .unwrap();
        let out = resample(&ramp, 2, 2).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                for c in 0..3 {
                    let expect = bicubic_oracle(&ramp, 2, 2, y, x, c);
                    assert!((out.get(y, x, c) as f64 - expect).abs() < 1e-6);
                }
            }
        }
        // Sample positions of a 4→2 reduction fall halfway between pixels,
        // where the kernel weights are (-1, 9, 9, -1)/16 on taps -1..=2.
        let wts = [-1.0, 9.0, 9.0, -1.0].map(|v: f64| v / 16.0);
        let taps = [0usize, 0, 1, 2];
        let mut manual = 0.0;
        for (wy, &ty) in wts.iter().zip(&taps) {
            for (wx, &tx) in wts.iter().zip(&taps) {
                manual += wy * wx * ramp.get(ty, tx, 0) as f64;
            }
        }
        assert!((out.get(0, 0, 0) as f64 - manual).abs() < 1e-6);
    }

    #[test]
    fn resample_random_matches_oracle() {
        let img = noise(11, 13, 2);
        for (oh, ow) in [(5, 6), (23, 29), (11, 4)] {
            let out = resample(&img, oh, ow).unwrap();
            for y in 0..oh {
                for x in 0..ow {
                    for c in 0..3 {
                        assert!((out.get(y, x, c) as f64 - bicubic_oracle(&img, oh, ow, y, x, c)).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn resample_rejects_zero_size() {
        assert!(resample(&noise(4, 4, 0), 0, 3).is_err());
    }

    #[test]
    fn upsample_lr_shapes() {
        let img = noise(16, 16, 3);
        assert_eq!(upsample_lr(&img, 1.0).unwrap(), img);
        let big = upsample_lr(&noise(64, 64, 3), 4.0).unwrap();
        assert_eq!((big.height(), big.width()), (256, 256));
        let c = upsample_lr(&ImageTensor::filled(8, 8, 3, 0.25).unwrap(), 3.0).unwrap();
        assert!(c.data().iter().all(|v| (v - 0.25).abs() < 1e-6));
        assert!(upsample_lr(&img, 0.5).is_err());
    }

    #[test]
    fn upsample_to_checks_ratio() {
        let lr = noise(16, 16, 4);
        assert!(upsample_to(&lr, 64, 64, 4.0).is_ok());
        assert!(matches!(upsample_to(&lr, 64, 64, 2.0), Err(Error::Config(_))));
    }

    #[test]
    fn reconstruct_degenerate_interval_is_identity() {
        let img = noise(32, 32, 5);
        let mut rng = stream(0, 0, 0, Purpose::Synthesis);
        let (out, r) = random_downsample_reconstruct(&img, 1.0, &mut rng).unwrap();
        assert_eq!(r, 1.0);
        assert_eq!(out, img);
    }

    #[test]
    fn reconstruct_is_deterministic_per_stream() {
        let img = noise(32, 32, 6);
        let a = random_downsample_reconstruct(&img, 4.0, &mut stream(9, 1, 2, Purpose::Synthesis)).unwrap();
        let b = random_downsample_reconstruct(&img, 4.0, &mut stream(9, 1, 2, Purpose::Synthesis)).unwrap();
        assert_eq!(a.1.to_bits(), b.1.to_bits());
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn drawn_ratio_mean_matches_uniform() {
        // U[1,4]: mean 2.5, sd 3/sqrt(12) ≈ 0.866; standard error over 10^4
        // draws ≈ 0.0087, so ±0.05 is a > 5σ band.
        let img = ImageTensor::filled(4, 4, 3, 0.5).unwrap();
        let mut rng = stream(123, 0, 0, Purpose::Synthesis);
        let mean: f64 = (0..10_000)
            .map(|_| random_downsample_reconstruct(&img, 4.0, &mut rng).unwrap().1)
            .sum::<f64>()
            / 10_000.0;
        assert!((2.45..=2.55).contains(&mean), "mean {mean}");
    }

    #[test]
    fn swap_examples() {
        let a = ImageTensor::filled(256, 256, 3, 0.0).unwrap();
        let b = ImageTensor::filled(256, 256, 3, 1.0).unwrap();
        let (mut a2, mut b2) = (a.clone(), b.clone());
        apply_swap(&mut a2, &mut b2, SwapRegion { u: 0, v: 0, crop_size: 128 }).unwrap();
        let ones = |img: &ImageTensor| (0..256 * 256).filter(|&i| img.data()[i * 3] == 1.0).count();
        assert_eq!(ones(&a2), 128 * 128);
        assert_eq!(256 * 256 - ones(&b2), 128 * 128);

        // Full-size crop exchanges the images wholesale.
        let x = noise(16, 16, 7);
        let y = noise(16, 16, 8);
        let (x2, y2, region) = random_region_swap(&x, &y, 16, &mut stream(0, 0, 0, Purpose::Synthesis)).unwrap();
        assert_eq!((region.u, region.v), (0, 0));
        assert_eq!(x2, y);
        assert_eq!(y2, x);
    }

    #[test]
    fn swap_errors() {
        let a = noise(8, 8, 0);
        let b = noise(8, 9, 0);
        let mut rng = stream(0, 0, 0, Purpose::Synthesis);
        assert!(random_region_swap(&a, &a, 9, &mut rng).is_err());
        assert!(random_region_swap(&a, &a, 0, &mut rng).is_err());
        let (mut a1, mut b1) = (a.clone(), b.clone());
        assert!(apply_swap(&mut a1, &mut b1, SwapRegion { u: 0, v: 0, crop_size: 2 }).is_err());
    }

    proptest! {
        #[test]
        fn swap_involution_and_sum_preservation(seed in 0u64..1000, h in 4usize..24, w in 4usize..24, frac in 0.1f64..1.0) {
            let a = noise(h, w, seed);
            let b = noise(h, w, seed + 1);
            let crop = ((h.min(w) as f64 * frac) as usize).max(1);
            let mut rng = stream(seed, 0, 0, Purpose::Synthesis);
            let (a2, b2, region) = random_region_swap(&a, &b, crop, &mut rng).unwrap();
            // Per-channel sums across the pair are exchanged values only.
            for c in 0..3 {
                let before: Vec<f32> = a.channel(c).into_iter().chain(b.channel(c)).collect();
                let after: Vec<f32> = a2.channel(c).into_iter().chain(b2.channel(c)).collect();
                let mut s0 = before.clone();
                let mut s1 = after.clone();
                s0.sort_by(f32::total_cmp);
                s1.sort_by(f32::total_cmp);
                prop_assert_eq!(s0, s1);
            }
            let (mut a3, mut b3) = (a2, b2);
            apply_swap(&mut a3, &mut b3, region).unwrap();
            prop_assert_eq!(a3, a);
            prop_assert_eq!(b3, b);
        }
    }

    fn sample_64(seed: u64) -> BitemporalSample {
        let pre = noise(64, 64, seed);
        let post = noise(16, 16, seed + 1);
        let mut label = Mask::zeros(64, 64).unwrap();
        for y in 10..30 {
            for x in 5..40 {
                label.set(y, x, true);
            }
        }
        BitemporalSample::new(pre, post, label, 4.0).unwrap()
    }

    #[test]
    fn synthesize_is_deterministic_and_keeps_label() {
        let s = sample_64(1);
        let cfg = SynthesisConfig {
            crop_size: 32,
            ..Default::default()
        };
        let a = synthesize_training_pair(&s, &cfg, &mut stream(5, 0, 0, Purpose::Synthesis)).unwrap();
        let b = synthesize_training_pair(&s, &cfg, &mut stream(5, 0, 0, Purpose::Synthesis)).unwrap();
        assert_eq!(a.sample.pre, b.sample.pre);
        assert_eq!(a.sample.post, b.sample.post);
        assert_eq!(a.decisions, b.decisions);
        assert_eq!(*a.sample.label, *s.label);
        assert!(a.sample.is_prepared());
        assert!((1.0..=4.0).contains(&a.decisions.r));
        assert!(a.sample.pre.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn synthesize_degenerate_is_identity() {
        let pre = noise(32, 32, 3);
        let post = noise(32, 32, 4);
        let s = BitemporalSample::new(pre.clone(), post.clone(), Mask::zeros(32, 32).unwrap(), 1.0).unwrap();
        let cfg = SynthesisConfig {
            r_d: 1.0,
            crop_size: 0,
            ..Default::default()
        };
        let out = synthesize_training_pair(&s, &cfg, &mut stream(0, 0, 0, Purpose::Synthesis)).unwrap();
        assert_eq!(out.sample.pre, pre);
        assert_eq!(out.sample.post, post);
        assert_eq!(out.decisions.swap, None);
    }

    #[test]
    fn prepare_inference_pair_contract() {
        let s = sample_64(2);
        let p = prepare_inference_pair(&s, Slot::Post).unwrap();
        assert_eq!(p.post.dims(), (64, 64, 3));
        assert_eq!(p.pre, s.pre);
        let q = prepare_inference_pair(&s, Slot::Post).unwrap();
        assert_eq!(p.post, q.post);
        let eq = BitemporalSample::new(noise(8, 8, 1), noise(8, 8, 2), Mask::zeros(8, 8).unwrap(), 1.0).unwrap();
        let pe = prepare_inference_pair(&eq, Slot::Post).unwrap();
        assert_eq!(pe.pre, eq.pre);
        assert_eq!(pe.post, eq.post);
    }

    #[test]
    fn augment_flip_consistency() {
        let s = prepare_inference_pair(&sample_64(3), Slot::Post).unwrap();
        let d = AugmentDecisions {
            hflip: true,
            vflip: false,
            ..Default::default()
        };
        let once = apply_augment(&s, &d).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                assert_eq!(once.label.get(y, x), s.label.get(y, 63 - x));
            }
        }
        let twice = apply_augment(&once, &d).unwrap();
        assert_eq!(twice.pre, s.pre);
        assert_eq!(twice.post, s.post);
        assert_eq!(*twice.label, *s.label);

        let v = AugmentDecisions {
            vflip: true,
            ..Default::default()
        };
        let vv = apply_augment(&apply_augment(&s, &v).unwrap(), &v).unwrap();
        assert_eq!(*vv.label, *s.label);
        assert_eq!(vv.pre, s.pre);
    }

    #[test]
    fn blur_zero_sigma_is_identity_and_constants_survive() {
        let img = noise(12, 12, 9);
        assert_eq!(gaussian_blur(&img, 0.0).unwrap(), img);
        let c = ImageTensor::filled(9, 9, 3, 0.3).unwrap();
        let b = gaussian_blur(&c, 1.2).unwrap();
        assert!(b.data().iter().all(|v| (v - 0.3).abs() < 1e-6));
        assert_eq!(gaussian_kernel(1.0).len(), 7);
        let d = AugmentDecisions {
            blur_pre: Some(1.0),
            ..Default::default()
        };
        let s = prepare_inference_pair(&sample_64(4), Slot::Post).unwrap();
        let out = apply_augment(&s, &d).unwrap();
        assert_eq!(*out.label, *s.label);
        assert_eq!(out.post, s.post);
        assert_ne!(out.pre, s.pre);
    }
}
