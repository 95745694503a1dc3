//! Implicit change decoder.
//!
//! Every query cell of a (possibly downsampled) HR grid gathers, for each
//! fused level, the feature of its nearest cell together with the sinusoidal
//! encoding of the offset to that cell's center and the level's cell size.
//! A pointwise MLP maps the concatenated bundle to two change scores.
//!
//! Channel 0 is "no change", channel 1 is "change".

use candle_core::{DType, Device, Tensor, D};

use crate::coordspace::{
    cell_center, cell_scale, encode_position, match_index, relative_offset, GridSpec, PE_DIM,
};
use crate::encoder::FusedFeatures;
use crate::error::{Error, Result};
use crate::image::Mask;
use crate::nn::{bilinear_resize, first_non_finite, softmax, BatchNorm, Ctx, Linear, Scope};

/// Version tag of the bundle layout `[z0 | (z_j, pe_j, cs_j) for j = 1..=4]`.
pub const BUNDLE_LAYOUT: &str = "z0,(z_j,pe_j,cs_j)x4;pe=6band-sincos-per-axis;v1";
pub const MLP_WIDTHS: [usize; 3] = [64, 64, 2];
const CS_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueryGrid {
    pub grid: GridSpec,
    pub ds: usize,
}

pub fn build_query_grid(hr: GridSpec, ds: usize) -> Result<QueryGrid> {
    if ds == 0 || hr.height() % ds != 0 || hr.width() % ds != 0 {
        return Err(Error::invalid(format!(
            "query downsampling {ds} does not divide {}x{}",
            hr.height(),
            hr.width()
        )));
    }
    Ok(QueryGrid {
        grid: GridSpec::new(hr.height() / ds, hr.width() / ds)?,
        ds,
    })
}

/// Length of one query bundle for fused width `2·dim`.
pub fn bundle_dim(fused_dim: usize, edge_clues: bool) -> usize {
    (if edge_clues { 3 } else { 0 }) + 4 * (2 * fused_dim + PE_DIM + CS_DIM)
}

/// Static per-query gather indices and coordinate features for one
/// (HR size, query grid, level sizes) combination.
#[derive(Debug, Clone)]
pub struct GatherPlan {
    pub query: QueryGrid,
    pub hr: GridSpec,
    pub levels: Vec<GridSpec>,
    /// Flat index into each level map, one per query.
    pub level_index: Vec<Vec<u32>>,
    /// Flat index into the HR grid for the edge features.
    pub z0_index: Vec<u32>,
    /// `Q × 4·(PE_DIM + 2)` coordinate features, level-major.
    pub coord_features: Vec<f64>,
}

impl GatherPlan {
    pub fn new(query: QueryGrid, hr: GridSpec, levels: &[GridSpec]) -> Result<Self> {
        let q = query.grid;
        let per_level = PE_DIM + CS_DIM;
        let mut level_index = vec![Vec::with_capacity(q.len()); levels.len()];
        let mut z0_index = Vec::with_capacity(q.len());
        let mut coord_features = Vec::with_capacity(q.len() * levels.len() * per_level);
        for cell in q.cells() {
            let center = cell_center(q, cell)?;
            let m0 = match_index(q, hr, cell)?;
            z0_index.push((m0.row * hr.width() + m0.col) as u32);
            for (j, &lg) in levels.iter().enumerate() {
                let m = match_index(q, lg, cell)?;
                level_index[j].push((m.row * lg.width() + m.col) as u32);
                let pe = encode_position(relative_offset(center, cell_center(lg, m)?))?;
                let cs = cell_scale(lg);
                coord_features.extend_from_slice(pe.values());
                coord_features.extend_from_slice(&[cs.sh, cs.sw]);
            }
        }
        Ok(Self {
            query,
            hr,
            levels: levels.to_vec(),
            level_index,
            z0_index,
            coord_features,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.query.grid.len()
    }
}

fn gather_flat(map: &Tensor, index: &[u32]) -> Result<Tensor> {
    let (b, c, h, w) = map.dims4()?;
    let idx = Tensor::from_slice(index, index.len(), map.device())?;
    let flat = map.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
    Ok(flat.index_select(&idx, 1)?)
}

/// Assembles `(B, Q, D)` query bundles in the fixed layout.
pub fn gather(plan: &GatherPlan, fused: &FusedFeatures) -> Result<Tensor> {
    if fused.levels.len() != plan.levels.len() {
        return Err(Error::invalid("fused level count does not match the gather plan"));
    }
    let first = &fused.levels[0];
    let (b, _, _, _) = first.dims4()?;
    let q = plan.num_queries();
    let per_level = PE_DIM + CS_DIM;
    let coords = Tensor::from_slice(&plan.coord_features, (q, plan.levels.len(), per_level), first.device())?
        .to_dtype(first.dtype())?;

    let mut parts = Vec::with_capacity(1 + 2 * plan.levels.len());
    if let Some(z0) = &fused.z0 {
        let (_, _, h, w) = z0.dims4()?;
        if (h, w) != (plan.hr.height(), plan.hr.width()) {
            return Err(Error::invalid("edge features are not at the HR size of the plan"));
        }
        parts.push(gather_flat(z0, &plan.z0_index)?);
    }
    for (j, (z, lg)) in fused.levels.iter().zip(&plan.levels).enumerate() {
        let (_, _, h, w) = z.dims4()?;
        if (h, w) != (lg.height(), lg.width()) {
            return Err(Error::invalid(format!(
                "level {} is {h}x{w}, plan expects {}x{}",
                j + 1,
                lg.height(),
                lg.width()
            )));
        }
        parts.push(gather_flat(z, &plan.level_index[j])?);
        parts.push(coords.narrow(1, j, 1)?.squeeze(1)?.unsqueeze(0)?.broadcast_as((b, q, per_level))?.contiguous()?);
    }
    Ok(Tensor::cat(&parts, D::Minus1)?)
}

/// Pointwise MLP `D → 64 → 64 → 2` with batch normalization and ReLU between
/// layers.
#[derive(Debug, Clone)]
pub struct ImplicitMlp {
    fc1: Linear,
    bn1: BatchNorm,
    fc2: Linear,
    bn2: BatchNorm,
    fc3: Linear,
    in_dim: usize,
}

impl ImplicitMlp {
    pub fn new(vs: &mut Scope, in_dim: usize) -> Result<Self> {
        let [h1, h2, out] = MLP_WIDTHS;
        Ok(Self {
            fc1: Linear::new(&mut vs.pp("fc1"), in_dim, h1)?,
            bn1: BatchNorm::new(&mut vs.pp("bn1"), h1)?,
            fc2: Linear::new(&mut vs.pp("fc2"), h1, h2)?,
            bn2: BatchNorm::new(&mut vs.pp("bn2"), h2)?,
            fc3: Linear::new(&mut vs.pp("fc3"), h2, out)?,
            in_dim,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    /// `(N, D)` bundles to `(N, 2)` logits.
    pub fn forward(&self, x: &Tensor, ctx: &Ctx) -> Result<Tensor> {
        let y = self.bn1.forward(&self.fc1.forward(x)?, ctx)?.relu()?;
        let y = self.bn2.forward(&self.fc2.forward(&y)?, ctx)?.relu()?;
        self.fc3.forward(&y)
    }
}

/// Decodes `(B, Q, D)` bundles to `(B, Q, 2)` logits.
pub fn decode(mlp: &ImplicitMlp, bundles: &Tensor, ctx: &Ctx) -> Result<Tensor> {
    let (b, q, d) = bundles.dims3()?;
    if d != mlp.in_dim() {
        return Err(Error::invalid(format!("bundle width {d}, decoder expects {}", mlp.in_dim())));
    }
    check_finite("decoder input", bundles)?;
    let logits = mlp.forward(&bundles.reshape((b * q, d))?, ctx)?.reshape((b, q, 2))?;
    check_finite("decoder output", &logits)?;
    Ok(logits)
}

/// Fails with the first `(batch, query)` holding a non-finite value of a
/// `(B, Q, ...)` tensor.
pub fn check_finite(stage: &'static str, t: &Tensor) -> Result<()> {
    match first_non_finite(t)? {
        Some((batch, query)) => Err(Error::NonFinite { stage, batch, query }),
        None => Ok(()),
    }
}

/// `(B, 2, H, W)` per-pixel probabilities.
#[derive(Debug, Clone)]
pub struct ChangeScoreMap {
    pub probs: Tensor,
}

impl ChangeScoreMap {
    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        Ok(Self {
            probs: softmax(logits, 1)?,
        })
    }

    pub fn dims(&self) -> Result<(usize, usize, usize, usize)> {
        Ok(self.probs.dims4()?)
    }
}

/// Query logits `(B, Q, 2)` laid out on the query grid as `(B, 2, Hq, Wq)`.
pub fn logits_to_map(logits: &Tensor, grid: GridSpec) -> Result<Tensor> {
    let (b, _, _) = logits.dims3()?;
    Ok(logits
        .reshape((b, grid.height(), grid.width(), 2))?
        .permute((0, 3, 1, 2))?
        .contiguous()?)
}

/// Bilinear interpolation of the probabilities to `h × w`, renormalized so
/// each pixel's pair sums to one.
pub fn upsample_scores(scores: &ChangeScoreMap, h: usize, w: usize) -> Result<ChangeScoreMap> {
    let (_, _, sh, sw) = scores.probs.dims4()?;
    if (sh, sw) == (h, w) {
        return Ok(scores.clone());
    }
    let up = bilinear_resize(&scores.probs, h, w)?;
    let total = up.sum_keepdim(1)?;
    Ok(ChangeScoreMap {
        probs: up.broadcast_div(&total)?,
    })
}

/// Per-pixel argmax; ties resolve to no-change.
pub fn predict_mask(scores: &ChangeScoreMap) -> Result<Vec<Mask>> {
    let (b, _, h, w) = scores.probs.dims4()?;
    let p = scores.probs.to_dtype(DType::F64)?;
    let no = p.narrow(1, 0, 1)?.flatten_all()?.to_vec1::<f64>()?;
    let yes = p.narrow(1, 1, 1)?.flatten_all()?.to_vec1::<f64>()?;
    (0..b)
        .map(|i| {
            let data = (0..h * w)
                .map(|k| (yes[i * h * w + k] > no[i * h * w + k]) as u8)
                .collect();
            Mask::new(h, w, data)
        })
        .collect()
}

/// Builds a score map from explicit `(no_change, change)` pairs; test helper.
pub fn score_map_from_pairs(pairs: &[(f64, f64)], h: usize, w: usize) -> Result<ChangeScoreMap> {
    let mut data = vec![0.0; 2 * h * w];
    for (i, &(a, b)) in pairs.iter().enumerate() {
        data[i] = a;
        data[h * w + i] = b;
    }
    Ok(ChangeScoreMap {
        probs: Tensor::from_vec(data, (1, 2, h, w), &Device::Cpu)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    fn g(n: usize) -> GridSpec {
        GridSpec::square(n).unwrap()
    }

    #[test]
    fn query_grid_examples() {
        let q = build_query_grid(g(256), 2).unwrap();
        assert_eq!((q.grid.height(), q.grid.width()), (128, 128));
        let q1 = build_query_grid(g(64), 1).unwrap();
        assert_eq!(q1.grid, g(64));
        let c = cell_center(q.grid, crate::coordspace::CellIndex::new(0, 0)).unwrap();
        assert_eq!((c.u, c.v), (1.0 / 256.0, 1.0 / 256.0));
        assert!(build_query_grid(g(30), 4).is_err());
        assert!(build_query_grid(g(30), 0).is_err());
    }

    #[test]
    fn reference_bundle_is_619_wide() {
        assert_eq!(bundle_dim(64, true), 3 + 4 * (2 * 64 + 24 + 2));
        assert_eq!(bundle_dim(64, true), 619);
        assert_eq!(bundle_dim(64, false), 616);
    }

    #[test]
    fn equal_grids_have_zero_offsets_and_shared_scale() {
        let hr = g(16);
        let q = build_query_grid(hr, 1).unwrap();
        let plan = GatherPlan::new(q, hr, &[g(16); 4]).unwrap();
        let per = PE_DIM + CS_DIM;
        for qi in 0..plan.num_queries() {
            assert_eq!(plan.level_index[0][qi] as usize, qi);
            for j in 0..4 {
                let f = &plan.coord_features[(qi * 4 + j) * per..(qi * 4 + j + 1) * per];
                for (k, v) in f[..PE_DIM].iter().enumerate() {
                    assert_eq!(*v, if k % 2 == 0 { 0.0 } else { 1.0 });
                }
                assert_eq!(&f[PE_DIM..], &[1.0 / 16.0, 1.0 / 16.0]);
            }
        }
    }

    #[test]
    fn shared_coarse_cell_distinct_offsets() {
        let hr = g(16);
        let q = build_query_grid(hr, 1).unwrap();
        let plan = GatherPlan::new(q, hr, &[g(4), g(2), g(2), g(1)]).unwrap();
        // Queries 0 and 1 of row 0 both match level-1 cell 0.
        assert_eq!(plan.level_index[0][0], plan.level_index[0][1]);
        let per = PE_DIM + CS_DIM;
        let a = &plan.coord_features[0..PE_DIM];
        let b = &plan.coord_features[4 * per..4 * per + PE_DIM];
        assert_ne!(a, b);
    }

    fn fused(b: usize, hr: usize, dim: usize) -> FusedFeatures {
        let dev = Device::Cpu;
        let levels = (1..=4)
            .map(|j| {
                let s = hr >> (j + 1);
                Tensor::arange(0f32, (b * 2 * dim * s * s) as f32, &dev)
                    .unwrap()
                    .reshape((b, 2 * dim, s, s))
                    .unwrap()
            })
            .collect();
        let z0 = Tensor::arange(0f32, (b * 3 * hr * hr) as f32, &dev)
            .unwrap()
            .reshape((b, 3, hr, hr))
            .unwrap();
        FusedFeatures {
            levels,
            z0: Some(z0),
        }
    }

    #[test]
    fn gather_layout_and_values() {
        let hr = g(64);
        let q = build_query_grid(hr, 2).unwrap();
        let levels: Vec<GridSpec> = (1..=4).map(|j| g(64 >> (j + 1))).collect();
        let plan = GatherPlan::new(q, hr, &levels).unwrap();
        let f = fused(2, 64, 4);
        let bundles = gather(&plan, &f).unwrap();
        assert_eq!(bundles.dims(), &[2, 32 * 32, bundle_dim(4, true)]);
        // Query (5, 9) on the 32-grid: z0 from HR cell (11, 19), level-1 cell (3, 5)
        // after the (2h+1)/4 rounding.
        let qi = 5 * 32 + 9;
        let row = bundles.get(1).unwrap().get(qi).unwrap().to_vec1::<f32>().unwrap();
        let hr_cell = (11 * 64 + 19) as f32;
        let base0 = (3 * 64 * 64) as f32;
        assert_eq!(row[0], base0 + hr_cell);
        let l1 = (5 / 2 * 16 + 9 / 2) as f32;
        // Level 1 map is 16x16 with 8 channels; batch 1 channel 0 offset = 8*256.
        let m = crate::coordspace::match_index(q.grid, g(16), crate::coordspace::CellIndex::new(5, 9)).unwrap();
        assert_eq!(row[3], (8 * 256 + m.row * 16 + m.col) as f32);
        let _ = l1;
    }

    #[test]
    fn decode_is_pointwise_at_eval() {
        let mut store = ParamStore::new(DType::F64, 3);
        let mlp = ImplicitMlp::new(&mut store.root().pp("mlp"), 10).unwrap();
        let x = Tensor::randn(0f64, 1.0, (1, 6, 10), &Device::Cpu).unwrap();
        let full = decode(&mlp, &x, &Ctx::eval()).unwrap();
        for i in 0..6 {
            let one = decode(&mlp, &x.narrow(1, i, 1).unwrap(), &Ctx::eval()).unwrap();
            let a = one.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let b = full.narrow(1, i, 1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        // Permutation equivariance and duplicate rows.
        let perm = Tensor::from_vec(vec![5u32, 0, 3, 3, 1, 2], 6, &Device::Cpu).unwrap();
        let px = x.index_select(&perm, 1).unwrap();
        let pout = decode(&mlp, &px, &Ctx::eval()).unwrap();
        let expect = full.index_select(&perm, 1).unwrap();
        let a = pout.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = expect.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_reports_non_finite_location() {
        let mut store = ParamStore::new(DType::F64, 3);
        let mlp = ImplicitMlp::new(&mut store.root().pp("mlp"), 4).unwrap();
        let mut v = vec![0.5f64; 2 * 3 * 4];
        v[(3 + 2) * 4 + 1] = f64::NAN;
        let x = Tensor::from_vec(v, (2, 3, 4), &Device::Cpu).unwrap();
        match decode(&mlp, &x, &Ctx::eval()) {
            Err(Error::NonFinite { batch, query, .. }) => assert_eq!((batch, query), (1, 2)),
            other => panic!("expected non-finite error, got {other:?}"),
        }
        let mut l = vec![0.0f64; 2 * 5 * 2];
        l[(5 + 3) * 2] = f64::INFINITY;
        let logits = Tensor::from_vec(l, (2, 5, 2), &Device::Cpu).unwrap();
        match check_finite("decoder output", &logits) {
            Err(Error::NonFinite { batch, query, stage }) => {
                assert_eq!((batch, query, stage), (1, 3, "decoder output"))
            }
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn scores_normalized_before_and_after_upsampling() {
        let logits = Tensor::randn(0f64, 3.0, (2, 2, 8, 8), &Device::Cpu).unwrap();
        let s = ChangeScoreMap::from_logits(&logits).unwrap();
        let up = upsample_scores(&s, 16, 16).unwrap();
        for m in [&s, &up] {
            let sums = m.probs.sum(1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert!(sums.iter().all(|v| (v - 1.0).abs() < 1e-6));
        }
        let same = upsample_scores(&s, 8, 8).unwrap();
        assert_eq!(
            same.probs.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            s.probs.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
        let c = score_map_from_pairs(&[(0.3, 0.7); 16], 4, 4).unwrap();
        let cu = upsample_scores(&c, 12, 12).unwrap();
        let v = cu.probs.narrow(1, 1, 1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|x| (x - 0.7).abs() < 1e-12));
    }

    #[test]
    fn predict_mask_rules() {
        let s = score_map_from_pairs(&[(0.9, 0.1), (0.5, 0.5), (0.2, 0.8), (0.0, 1.0)], 2, 2).unwrap();
        let m = predict_mask(&s).unwrap();
        assert_eq!(m[0].data(), &[0, 0, 1, 1]);
        let all = score_map_from_pairs(&[(0.1, 0.9); 9], 3, 3).unwrap();
        assert_eq!(predict_mask(&all).unwrap()[0].count_ones(), 9);
    }
}
