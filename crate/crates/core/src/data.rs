//! Dataset layout, tiling, splits, sweep samples and the procedural fixture.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageTensor, Mask};
use crate::rng::{stream, Purpose};
use crate::synthesis::{degrade, downsample, lr_size, BitemporalSample, Slot};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// `root/{A,B,label}/<stem>.png` plus `root/{train,val,test}.txt`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn pre_path(&self, stem: &str) -> PathBuf {
        self.root.join("A").join(format!("{stem}.png"))
    }

    pub fn post_path(&self, stem: &str) -> PathBuf {
        self.root.join("B").join(format!("{stem}.png"))
    }

    pub fn label_path(&self, stem: &str) -> PathBuf {
        self.root.join("label").join(format!("{stem}.png"))
    }

    pub fn split_path(&self, split: &str) -> PathBuf {
        self.root.join(format!("{split}.txt"))
    }

    /// Stems listed in a split file; blank lines are skipped.
    pub fn read_split(&self, split: &str) -> Result<Vec<String>> {
        let path = self.split_path(split);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect())
    }

    pub fn write_split(&self, split: &str, stems: &[String]) -> Result<()> {
        let path = self.split_path(split);
        let mut text = stems.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn create_dirs(&self) -> Result<()> {
        for d in ["A", "B", "label"] {
            let p = self.root.join(d);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    /// Checks that every stem of the split exists in all three directories.
    pub fn validate_split(&self, split: &str) -> Result<Vec<String>> {
        let stems = self.read_split(split)?;
        if stems.is_empty() {
            return Err(Error::Config(format!("split {split} under {} is empty", self.root.display())));
        }
        for stem in &stems {
            for p in [self.pre_path(stem), self.post_path(stem), self.label_path(stem)] {
                if !p.is_file() {
                    return Err(Error::Config(format!("split {split}: missing {}", p.display())));
                }
            }
        }
        Ok(stems)
    }

    pub fn load_raw(&self, stem: &str) -> Result<(ImageTensor, ImageTensor, Mask)> {
        Ok((
            ImageTensor::load_png(self.pre_path(stem))?,
            ImageTensor::load_png(self.post_path(stem))?,
            Mask::load_png(self.label_path(stem))?,
        ))
    }

    /// One sample at ratio `r_d`. If both images share a size the degraded
    /// slot is downsampled by `r_d`; otherwise the smaller image is taken as
    /// the LR observation as stored.
    pub fn load_sample(&self, stem: &str, r_d: f64, degraded: Slot) -> Result<BitemporalSample> {
        let (pre, post, label) = self.load_raw(stem)?;
        lr_sample(pre, post, label, r_d, degraded)
    }

    /// Equal-resolution sample for sweeps (both images at HR size).
    pub fn load_hr_sample(&self, stem: &str) -> Result<BitemporalSample> {
        let (pre, post, label) = self.load_raw(stem)?;
        if pre.dims() != post.dims() {
            return Err(Error::Config(format!(
                "{stem}: sweeps need equal-resolution sources, got {:?} and {:?}",
                pre.dims(),
                post.dims()
            )));
        }
        BitemporalSample::new(pre, post, label, 1.0)
    }
}

fn lr_sample(pre: ImageTensor, post: ImageTensor, label: Mask, r_d: f64, degraded: Slot) -> Result<BitemporalSample> {
    let (pre, post) = if pre.dims() == post.dims() {
        match degraded {
            Slot::Post => {
                let lr = downsample(&post, r_d)?;
                (pre, lr)
            }
            Slot::Pre => {
                let lr = downsample(&pre, r_d)?;
                (lr, post)
            }
        }
    } else {
        (pre, post)
    };
    BitemporalSample::new(pre, post, label, r_d)
}

/// In-memory split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub stems: Vec<String>,
    pub samples: Vec<BitemporalSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Loads a split at the training ratio.
    pub fn load(layout: &DatasetLayout, split: &str, r_d: f64, degraded: Slot) -> Result<Self> {
        let stems = layout.validate_split(split)?;
        let samples = stems
            .par_iter()
            .map(|s| layout.load_sample(s, r_d, degraded))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { stems, samples })
    }

    /// Loads a split with both images at HR size.
    pub fn load_hr(layout: &DatasetLayout, split: &str) -> Result<Self> {
        let stems = layout.validate_split(split)?;
        let samples = stems
            .par_iter()
            .map(|s| layout.load_hr_sample(s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { stems, samples })
    }
}

/// One tile cut from a source triple.
#[derive(Debug, Clone)]
pub struct Tile {
    pub stem: String,
    pub pre: ImageTensor,
    pub post: ImageTensor,
    pub label: Mask,
}

/// Non-overlapping row-major tiles; remainders are dropped and undersized
/// sources yield no tiles.
pub fn tile(source: &str, pre: &ImageTensor, post: &ImageTensor, label: &Mask, tile_size: usize) -> Result<Vec<Tile>> {
    if tile_size == 0 {
        return Err(Error::invalid("tile size must be >= 1"));
    }
    let (h, w, _) = pre.dims();
    if post.dims() != pre.dims() || (label.height(), label.width()) != (h, w) {
        return Err(Error::invalid(format!("{source}: images and label differ in size")));
    }
    if h < tile_size || w < tile_size {
        log::warn!("{source}: {h}x{w} is smaller than the {tile_size} tile, skipped");
        return Ok(Vec::new());
    }
    let mut tiles = Vec::new();
    for row in 0..h / tile_size {
        for col in 0..w / tile_size {
            let (y, x) = (row * tile_size, col * tile_size);
            tiles.push(Tile {
                stem: format!("{source}_{row}_{col}"),
                pre: pre.crop(y, x, tile_size, tile_size)?,
                post: post.crop(y, x, tile_size, tile_size)?,
                label: label.crop(y, x, tile_size, tile_size)?,
            });
        }
    }
    Ok(tiles)
}

fn write_tile(layout: &DatasetLayout, t: &Tile) -> Result<()> {
    t.pre.save_png(layout.pre_path(&t.stem))?;
    t.post.save_png(layout.post_path(&t.stem))?;
    t.label.save_png(layout.label_path(&t.stem))
}

fn list_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(s) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(s.to_owned());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

/// Tiles a source dataset into `dst`.
///
/// A source with `train/`, `val/` and `test/` subdirectories (each holding
/// `A/`, `B/`, `label/`) keeps its splits. A flat source is split at the
/// source-image level with a seeded 70/10/20 shuffle.
pub fn prepare(src: &Path, dst: &Path, tile_size: usize, seed: u64) -> Result<DatasetLayout> {
    let out = DatasetLayout::new(dst);
    out.create_dirs()?;
    let presplit = SPLITS.iter().all(|s| src.join(s).join("A").is_dir());
    let assignments: Vec<(String, Vec<(DatasetLayout, String)>)> = if presplit {
        SPLITS
            .iter()
            .map(|s| {
                let layout = DatasetLayout::new(src.join(s));
                let stems = list_stems(&layout.root.join("A"))?;
                Ok((s.to_string(), stems.into_iter().map(|st| (layout.clone(), st)).collect()))
            })
            .collect::<Result<_>>()?
    } else {
        let layout = DatasetLayout::new(src);
        let mut stems = list_stems(&src.join("A"))?;
        stems.shuffle(&mut stream(seed, 0, 0, Purpose::Shuffle));
        let n = stems.len();
        let n_train = (n as f64 * 0.7).round() as usize;
        let n_val = (n as f64 * 0.1).round() as usize;
        let mut parts = vec![Vec::new(), Vec::new(), Vec::new()];
        for (i, st) in stems.into_iter().enumerate() {
            let k = if i < n_train {
                0
            } else if i < n_train + n_val {
                1
            } else {
                2
            };
            parts[k].push((layout.clone(), st));
        }
        SPLITS.iter().map(|s| s.to_string()).zip(parts).collect()
    };
    for (split, sources) in assignments {
        let stems: Vec<Vec<String>> = sources
            .par_iter()
            .map(|(layout, st)| {
                let (pre, post, label) = layout.load_raw(st)?;
                let tiles = tile(st, &pre, &post, &label, tile_size)?;
                for t in &tiles {
                    write_tile(&out, t)?;
                }
                Ok(tiles.into_iter().map(|t| t.stem).collect())
            })
            .collect::<Result<_>>()?;
        out.write_split(&split, &stems.concat())?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub ratios: Vec<f64>,
    pub degraded_slot: Slot,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            ratios: vec![1.0, 1.3, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0],
            degraded_slot: Slot::Post,
        }
    }
}

impl SweepSpec {
    pub fn new(ratios: Vec<f64>, degraded_slot: Slot) -> Result<Self> {
        let s = Self { ratios, degraded_slot };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratios.is_empty() {
            return Err(Error::invalid("sweep needs at least one ratio"));
        }
        if let Some(r) = self.ratios.iter().find(|r| !(**r >= 1.0) || !r.is_finite()) {
            return Err(Error::invalid(format!("sweep ratio {r} is not >= 1")));
        }
        if self.ratios.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("sweep ratios must be strictly increasing"));
        }
        Ok(())
    }
}

/// Realized intermediate size of a sweep point.
pub fn sweep_lr_size(h: usize, w: usize, ratio: f64) -> (usize, usize) {
    (lr_size(h, ratio), lr_size(w, ratio))
}

/// One degraded-and-restored sample per ratio, sharing the label.
pub fn make_sweep(sample: &BitemporalSample, spec: &SweepSpec) -> Result<Vec<BitemporalSample>> {
    spec.validate()?;
    spec.ratios
        .iter()
        .map(|&r| {
            let (pre, post) = match spec.degraded_slot {
                Slot::Post => (sample.pre.clone(), degrade(&sample.post, r)?),
                Slot::Pre => (degrade(&sample.pre, r)?, sample.post.clone()),
            };
            Ok(BitemporalSample {
                pre,
                post,
                label: Arc::clone(&sample.label),
                ratio: r,
            })
        })
        .collect()
}

/// Epoch-seeded shuffled index batches; the last batch may be partial.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if n == 0 || batch_size == 0 {
        return Err(Error::invalid("batching needs a nonempty dataset and batch size >= 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, epoch, 0, Purpose::Shuffle));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Procedural bitemporal tile: a smooth textured background shared by both
/// dates, a few persistent objects, and objects that appear or disappear.
pub fn synthetic_tile(size: usize, seed: u64, index: u64) -> Result<(ImageTensor, ImageTensor, Mask)> {
    let mut rng = stream(seed, 0, index, Purpose::Fixture);
    let s = size as f64;
    let waves: Vec<[f64; 5]> = (0..3 * 3)
        .map(|_| {
            [
                rng.random_range(0.5..3.0) * std::f64::consts::TAU / s,
                rng.random_range(0.5..3.0) * std::f64::consts::TAU / s,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.03..0.08),
                0.0,
            ]
        })
        .collect();
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.3..0.6));
    let noise: Vec<f64> = (0..size * size * 3).map(|_| rng.random_range(-0.03..0.03)).collect();
    let background = |y: usize, x: usize, c: usize| {
        let mut v = base[c];
        for k in 0..3 {
            let [fy, fx, ph, amp, _] = waves[c * 3 + k];
            v += amp * (fy * y as f64 + fx * x as f64 + ph).sin();
        }
        v + noise[(y * size + x) * 3 + c]
    };

    #[derive(Clone, Copy)]
    enum Shape {
        Rect { y0: f64, x0: f64, h: f64, w: f64 },
        Disc { cy: f64, cx: f64, r: f64 },
    }
    impl Shape {
        fn contains(&self, y: usize, x: usize) -> bool {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            match *self {
                Shape::Rect { y0, x0, h, w } => py >= y0 && py < y0 + h && px >= x0 && px < x0 + w,
                Shape::Disc { cy, cx, r } => (py - cy).powi(2) + (px - cx).powi(2) <= r * r,
            }
        }
    }
    let draw = |rng: &mut crate::rng::StreamRng| {
        let lo = s * 0.2;
        let hi = s * 0.4;
        let shape = if rng.random_bool(0.5) {
            let h = rng.random_range(lo..hi);
            let w = rng.random_range(lo..hi);
            Shape::Rect {
                y0: rng.random_range(0.0..s - h),
                x0: rng.random_range(0.0..s - w),
                h,
                w,
            }
        } else {
            let r = rng.random_range(lo / 2.0..hi / 2.0);
            Shape::Disc {
                cy: rng.random_range(r..s - r),
                cx: rng.random_range(r..s - r),
                r,
            }
        };
        let bright = rng.random_bool(0.5);
        let colour: [f64; 3] = std::array::from_fn(|_| {
            if bright {
                rng.random_range(0.8..1.0)
            } else {
                rng.random_range(0.0..0.15)
            }
        });
        (shape, colour)
    };
    let persistent: Vec<_> = (0..rng.random_range(1..=2)).map(|_| draw(&mut rng)).collect();
    let appearing: Vec<_> = (0..rng.random_range(1..=2)).map(|_| draw(&mut rng)).collect();
    let vanishing: Vec<_> = (0..rng.random_range(0..=1)).map(|_| draw(&mut rng)).collect();
    let gain: f64 = rng.random_range(0.95..1.05);

    // Later groups are drawn on top; persistent objects cover changes, which
    // is what the label encodes.
    let paint = |objs: &[&[(Shape, [f64; 3])]], y: usize, x: usize, c: usize| -> Option<f64> {
        objs.iter()
            .flat_map(|o| o.iter())
            .rev()
            .find(|(sh, _)| sh.contains(y, x))
            .map(|(_, col)| col[c])
    };
    let pre = ImageTensor::from_fn(size, size, 3, |y, x, c| {
        paint(&[&vanishing, &persistent], y, x, c)
            .unwrap_or_else(|| background(y, x, c))
            .clamp(0.0, 1.0) as f32
    })?;
    let post = ImageTensor::from_fn(size, size, 3, |y, x, c| {
        (paint(&[&appearing, &persistent], y, x, c).unwrap_or_else(|| background(y, x, c)) * gain).clamp(0.0, 1.0)
            as f32
    })?;
    let mut label = Mask::zeros(size, size)?;
    for y in 0..size {
        for x in 0..size {
            let changed = appearing.iter().chain(&vanishing).any(|(sh, _)| sh.contains(y, x));
            let covered = persistent.iter().any(|(sh, _)| sh.contains(y, x));
            label.set(y, x, changed && !covered);
        }
    }
    // Quantize through 8 bits so in-memory and on-disk fixtures agree.
    let q = |img: ImageTensor| -> Result<ImageTensor> {
        let (h, w, c) = img.dims();
        ImageTensor::new(
            h,
            w,
            c,
            img.data().iter().map(|v| (v * 255.0).round() / 255.0).collect(),
        )
    };
    Ok((q(pre)?, q(post)?, label))
}

/// Writes `n` procedural tiles with every split listing all of them (an
/// overfit set).
pub fn write_synthetic_fixture(root: &Path, n: usize, size: usize, seed: u64) -> Result<DatasetLayout> {
    let layout = DatasetLayout::new(root);
    layout.create_dirs()?;
    let stems: Vec<String> = (0..n).map(|i| format!("synthetic_{i:03}")).collect();
    stems
        .par_iter()
        .enumerate()
        .map(|(i, stem)| {
            let (pre, post, label) = synthetic_tile(size, seed, i as u64)?;
            write_tile(
                &layout,
                &Tile {
                    stem: stem.clone(),
                    pre,
                    post,
                    label,
                },
            )
        })
        .collect::<Result<()>>()?;
    for split in SPLITS {
        layout.write_split(split, &stems)?;
    }
    Ok(layout)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> (ImageTensor, ImageTensor, Mask) {
        let img = ImageTensor::from_fn(h, w, 3, |y, x, c| ((y * w + x + c) % 251) as f32 / 250.0).unwrap();
        let post = ImageTensor::from_fn(h, w, 3, |y, x, c| ((y + 2 * x + c) % 199) as f32 / 198.0).unwrap();
        let mut label = Mask::zeros(h, w).unwrap();
        for y in 0..h {
            for x in 0..w {
                label.set(y, x, (x * 7 + y * 3) % 5 == 0);
            }
        }
        (img, post, label)
    }

    #[test]
    fn tile_counts() {
        for (side, expect) in [(1024, 16), (256, 1), (300, 1), (200, 0)] {
            let (a, b, l) = ramp(side, side);
            assert_eq!(tile("src", &a, &b, &l, 256).unwrap().len(), expect);
        }
        let (a, b, l) = ramp(256, 256);
        let t = tile("src", &a, &b, &l, 256).unwrap();
        assert_eq!(t[0].stem, "src_0_0");
        assert_eq!(t[0].pre, a);
        assert_eq!(t[0].label, l);
    }

    #[test]
    fn tiles_reassemble_cropped_region() {
        let (a, b, l) = ramp(70, 100);
        let tiles = tile("s", &a, &b, &l, 32).unwrap();
        assert_eq!(tiles.len(), 2 * 3);
        assert_eq!(tiles[4].stem, "s_1_1");
        for t in &tiles {
            let parts: Vec<usize> = t.stem.split('_').skip(1).map(|p| p.parse().unwrap()).collect();
            let (y0, x0) = (parts[0] * 32, parts[1] * 32);
            for y in 0..32 {
                for x in 0..32 {
                    for c in 0..3 {
                        assert_eq!(t.pre.get(y, x, c), a.get(y0 + y, x0 + x, c));
                        assert_eq!(t.post.get(y, x, c), b.get(y0 + y, x0 + x, c));
                    }
                    assert_eq!(t.label.get(y, x), l.get(y0 + y, x0 + x));
                }
            }
        }
    }

    #[test]
    fn sweep_shares_label_and_restores_size() {
        let (a, b, l) = ramp(256, 256);
        let sample = BitemporalSample::new(a, b, l, 1.0).unwrap();
        let spec = SweepSpec::new(vec![1.0, 2.0, 4.0], Slot::Post).unwrap();
        let sweep = make_sweep(&sample, &spec).unwrap();
        assert_eq!(sweep.len(), 3);
        assert_eq!(sweep[0].post, sample.post);
        assert_eq!(sweep[0].pre, sample.pre);
        for s in &sweep {
            assert!(Arc::ptr_eq(&s.label, &sample.label));
            assert_eq!(s.post.dims(), (256, 256, 3));
        }
        assert_eq!(sweep[2].ratio, 4.0);
        assert_eq!(sweep_lr_size(256, 256, 4.0), (64, 64));
        assert_eq!(sweep_lr_size(256, 256, 1.3), (197, 197));
        assert_ne!(sweep[2].post, sample.post);
    }

    #[test]
    fn sweep_spec_validation() {
        assert!(SweepSpec::default().validate().is_ok());
        assert!(SweepSpec::new(vec![], Slot::Post).is_err());
        assert!(SweepSpec::new(vec![2.0, 2.0], Slot::Post).is_err());
        assert!(SweepSpec::new(vec![0.5, 2.0], Slot::Post).is_err());
    }

    #[test]
    fn batch_shapes_and_determinism() {
        let b = batches(17, 8, 3, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![8, 8, 1]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..17).collect::<Vec<_>>());
        assert_eq!(b, batches(17, 8, 3, 0).unwrap());
        assert_ne!(b, batches(17, 8, 3, 1).unwrap());
        assert!(batches(0, 8, 3, 0).is_err());
    }

    #[test]
    fn fixture_has_changes_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let layout = write_synthetic_fixture(dir.path(), 4, 64, 7).unwrap();
        let stems = layout.validate_split("train").unwrap();
        assert_eq!(stems.len(), 4);
        for (i, stem) in stems.iter().enumerate() {
            let (pre, post, label) = layout.load_raw(stem).unwrap();
            let (p2, q2, l2) = synthetic_tile(64, 7, i as u64).unwrap();
            assert_eq!(pre, p2);
            assert_eq!(post, q2);
            assert_eq!(label, l2);
            let frac = label.count_ones() as f64 / (64.0 * 64.0);
            assert!(frac > 0.005 && frac < 0.6, "change fraction {frac}");
        }
        let ds = Dataset::load(&layout, "train", 4.0, Slot::Post).unwrap();
        assert_eq!(ds.samples[0].post.dims(), (16, 16, 3));
        assert_eq!(ds.samples[0].pre.dims(), (64, 64, 3));
        let hr = Dataset::load_hr(&layout, "val").unwrap();
        assert!(hr.samples[0].is_prepared());
    }

    #[test]
    fn prepare_tiles_flat_source() {
        let src = tempfile::tempdir().unwrap();
        let dst = tempfile::tempdir().unwrap();
        let layout = DatasetLayout::new(src.path());
        layout.create_dirs().unwrap();
        for i in 0..10 {
            let (a, b, l) = ramp(64, 96);
            let t = Tile {
                stem: format!("img{i}"),
                pre: a,
                post: b,
                label: l,
            };
            write_tile(&layout, &t).unwrap();
        }
        let out = prepare(src.path(), dst.path(), 32, 0).unwrap();
        let counts: Vec<usize> = SPLITS.iter().map(|s| out.read_split(s).unwrap().len()).collect();
        assert_eq!(counts, vec![7 * 6, 6, 2 * 6]);
        out.validate_split("test").unwrap();
    }
}
