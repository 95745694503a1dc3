//! Handcrafted edge clues from per-channel Canny maps of both temporal images.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::synthesis::gaussian_kernel;

/// Gradient magnitudes are compared on a fixed-point grid so that
/// symmetric inputs (e.g. an image and its intensity inverse) make identical
/// suppression and threshold decisions.
const MAG_SCALE: f64 = (1u64 << 32) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    /// Percentiles of the nonzero gradient magnitudes of the channel.
    #[default]
    Percentile,
    /// Fractions of the channel's maximum gradient magnitude.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CannyConfig {
    pub sigma: f64,
    pub mode: ThresholdMode,
    pub percentile_low: f64,
    pub percentile_high: f64,
    pub fixed_low: f64,
    pub fixed_high: f64,
}

impl Default for CannyConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            mode: ThresholdMode::Percentile,
            percentile_low: 0.7,
            percentile_high: 0.9,
            fixed_low: 0.1,
            fixed_high: 0.2,
        }
    }
}

/// Binary edge plane, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgePlane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

/// H×W×3 sum of two binary edge maps; every value is 0, 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap(ImageTensor);

impl EdgeMap {
    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Ok(Self(ImageTensor::filled(height, width, 3, 0.0)?))
    }

    pub fn as_image(&self) -> &ImageTensor {
        &self.0
    }

    pub fn flip_horizontal(&self) -> Self {
        Self(self.0.flip_horizontal())
    }

    pub fn flip_vertical(&self) -> Self {
        Self(self.0.flip_vertical())
    }
}

fn convolve_separable(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * plane[y * w + (x as i64 + j as i64 - r).clamp(0, w as i64 - 1) as usize])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[(y as i64 + j as i64 - r).clamp(0, h as i64 - 1) as usize * w + x])
                .sum();
        }
    }
    out
}

fn nearest_rank(sorted: &[u64], p: f64) -> u64 {
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Gaussian smoothing, Sobel gradients, non-maximum suppression and
/// double-threshold hysteresis over one channel.
pub fn canny(channel: &[f32], height: usize, width: usize, cfg: &CannyConfig) -> Result<EdgePlane> {
    if channel.len() != height * width || height == 0 || width == 0 {
        return Err(Error::invalid(format!(
            "channel of {} values does not form a {height}x{width} plane",
            channel.len()
        )));
    }
    let (h, w) = (height, width);
    let plane: Vec<f64> = channel.iter().map(|&v| v as f64).collect();
    let smooth = if cfg.sigma > 0.0 {
        convolve_separable(&plane, h, w, &gaussian_kernel(cfg.sigma))
    } else {
        plane
    };

    let at = |y: i64, x: i64| smooth[y.clamp(0, h as i64 - 1) as usize * w + x.clamp(0, w as i64 - 1) as usize];
    let mut mag = vec![0u64; h * w];
    let mut dir = vec![0u8; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            let i = y as usize * w + x as usize;
            mag[i] = (gx.hypot(gy) * MAG_SCALE).round() as u64;
            let mut angle = gy.atan2(gx).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            dir[i] = match angle {
                a if !(22.5..157.5).contains(&a) => 0,
                a if a < 67.5 => 1,
                a if a < 112.5 => 2,
                _ => 3,
            };
        }
    }

    let mut nonzero: Vec<u64> = mag.iter().copied().filter(|&m| m > 0).collect();
    if nonzero.is_empty() {
        return Ok(EdgePlane {
            height: h,
            width: w,
            data: vec![0; h * w],
        });
    }
    nonzero.sort_unstable();
    let (low, high) = match cfg.mode {
        ThresholdMode::Percentile => (
            nearest_rank(&nonzero, cfg.percentile_low),
            nearest_rank(&nonzero, cfg.percentile_high),
        ),
        ThresholdMode::Fixed => {
            let max = *nonzero.last().unwrap() as f64;
            (
                ((cfg.fixed_low * max).round() as u64).max(1),
                ((cfg.fixed_high * max).round() as u64).max(1),
            )
        }
    };

    // Suppression: strictly above the neighbor behind, at least the one ahead.
    let get = |y: i64, x: i64| {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut kept = vec![0u64; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let i = y as usize * w + x as usize;
            let m = mag[i];
            if m == 0 {
                continue;
            }
            let (dy, dx) = match dir[i] {
                0 => (0, 1),
                1 => (1, 1),
                2 => (1, 0),
                _ => (1, -1),
            };
            if m > get(y - dy, x - dx) && m >= get(y + dy, x + dx) {
                kept[i] = m;
            }
        }
    }

    let mut out = vec![0u8; h * w];
    let mut queue = VecDeque::new();
    for (i, &m) in kept.iter().enumerate() {
        if m > 0 && m >= high {
            out[i] = 1;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = ((i / w) as i64, (i % w) as i64);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if out[j] == 0 && kept[j] > 0 && kept[j] >= low {
                    out[j] = 1;
                    queue.push_back(j);
                }
            }
        }
    }
    Ok(EdgePlane {
        height: h,
        width: w,
        data: out,
    })
}

/// Per-channel Canny maps of one image, as an H×W×C array of {0, 1}.
pub fn canny_image(img: &ImageTensor, cfg: &CannyConfig) -> Result<Vec<EdgePlane>> {
    (0..img.channels())
        .map(|c| canny(&img.channel(c), img.height(), img.width(), cfg))
        .collect()
}

/// Channel-wise sum of the Canny maps of both images.
pub fn edge_clues(hr_s: &ImageTensor, lr_u: &ImageTensor, cfg: &CannyConfig) -> Result<EdgeMap> {
    if hr_s.dims() != lr_u.dims() {
        return Err(Error::invalid(format!(
            "edge inputs differ in shape: {:?} vs {:?}",
            hr_s.dims(),
            lr_u.dims()
        )));
    }
    if hr_s.channels() != 3 {
        return Err(Error::invalid("edge clues expect 3-channel images"));
    }
    let a = canny_image(hr_s, cfg)?;
    let b = canny_image(lr_u, cfg)?;
    let (h, w, c) = hr_s.dims();
    let img = ImageTensor::from_fn(h, w, c, |y, x, ch| {
        (a[ch].data[y * w + x] + b[ch].data[y * w + x]) as f32
    })?;
    Ok(EdgeMap(img))
}
