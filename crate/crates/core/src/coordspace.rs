//! The continuous normalized space `[0,1]²` shared by every grid.
//!
//! A grid of `H×W` cells places cell `(h, w)` at its center
//! `(1/(2H) + h/H, 1/(2W) + w/W)`. Grids of different resolution are related
//! by nearest-center matching, and the decoder consumes the sinusoidal
//! encoding of the residual offset plus the matched grid's cell size.

use crate::error::{Error, Result};

/// Frequency bands per offset axis.
pub const PE_BANDS: usize = 6;
/// Length of a positional encoding: 2 axes × bands × (sin, cos).
pub const PE_DIM: usize = 2 * PE_BANDS * 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridSpec {
    height: usize,
    width: usize,
}

impl GridSpec {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "grid dimensions must be positive, got {height}x{width}"
            )));
        }
        Ok(Self { height, width })
    }

    pub fn square(side: usize) -> Result<Self> {
        Self::new(side, side)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, index: CellIndex) -> bool {
        index.row < self.height && index.col < self.width
    }

    /// Row-major iteration over every cell.
    pub fn cells(&self) -> impl Iterator<Item = CellIndex> + '_ {
        (0..self.height).flat_map(move |row| (0..self.width).map(move |col| CellIndex { row, col }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuousCoord {
    pub u: f64,
    pub v: f64,
}

impl ContinuousCoord {
    pub fn new(u: f64, v: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!(
                "coordinate ({u}, {v}) outside the unit square"
            )));
        }
        Ok(Self { u, v })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CellIndex {
    pub row: usize,
    pub col: usize,
}

impl CellIndex {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeOffset {
    pub du: f64,
    pub dv: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEncoding(pub [f64; PE_DIM]);

impl PositionalEncoding {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellScale {
    pub sh: f64,
    pub sw: f64,
}

#[inline]
fn axis_center(len: usize, i: usize) -> f64 {
    1.0 / (2.0 * len as f64) + i as f64 / len as f64
}

pub fn cell_center(grid: GridSpec, index: CellIndex) -> Result<ContinuousCoord> {
    if !grid.contains(index) {
        return Err(Error::invalid(format!(
            "cell ({}, {}) outside {}x{} grid",
            index.row, index.col, grid.height, grid.width
        )));
    }
    Ok(ContinuousCoord {
        u: axis_center(grid.height, index.row),
        v: axis_center(grid.width, index.col),
    })
}

/// Nearest cell along one axis: `round((target/hr)·(1/2 + i) − 1/2)`, ties
/// rounded away from zero, clamped into `[0, target)`.
///
/// Evaluated exactly in integers as `round((target·(2i+1) − hr) / (2·hr))`.
pub fn match_axis(hr_len: usize, target_len: usize, i: usize) -> usize {
    let num = target_len as i128 * (2 * i as i128 + 1) - hr_len as i128;
    let den = 2 * hr_len as i128;
    let rounded = if num >= 0 {
        (2 * num + den) / (2 * den)
    } else {
        -((-2 * num + den) / (2 * den))
    };
    rounded.clamp(0, target_len as i128 - 1) as usize
}

pub fn match_index(hr_grid: GridSpec, target_grid: GridSpec, hr_index: CellIndex) -> Result<CellIndex> {
    if !hr_grid.contains(hr_index) {
        return Err(Error::invalid(format!(
            "query cell ({}, {}) outside {}x{} grid",
            hr_index.row, hr_index.col, hr_grid.height, hr_grid.width
        )));
    }
    Ok(CellIndex {
        row: match_axis(hr_grid.height, target_grid.height, hr_index.row),
        col: match_axis(hr_grid.width, target_grid.width, hr_index.col),
    })
}

pub fn relative_offset(query: ContinuousCoord, matched_center: ContinuousCoord) -> RelativeOffset {
    RelativeOffset {
        du: query.u - matched_center.u,
        dv: query.v - matched_center.v,
    }
}

/// Per axis, band `k` emits `(sin(2^k·π·d), cos(2^k·π·d))`; the `du` block
/// precedes the `dv` block.
pub fn encode_position(offset: RelativeOffset) -> Result<PositionalEncoding> {
    if !offset.du.is_finite() || !offset.dv.is_finite() {
        return Err(Error::invalid(format!(
            "non-finite offset ({}, {})",
            offset.du, offset.dv
        )));
    }
    let mut out = [0.0; PE_DIM];
    for (axis, d) in [offset.du, offset.dv].into_iter().enumerate() {
        for k in 0..PE_BANDS {
            let angle = (1u32 << k) as f64 * std::f64::consts::PI * d;
            let slot = axis * PE_BANDS * 2 + 2 * k;
            out[slot] = angle.sin();
            out[slot + 1] = angle.cos();
        }
    }
    Ok(PositionalEncoding(out))
}

pub fn cell_scale(grid: GridSpec) -> CellScale {
    CellScale {
        sh: 1.0 / grid.height as f64,
        sw: 1.0 / grid.width as f64,
    }
}
