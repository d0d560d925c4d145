//! Uniform asymmetric min-max grids, per row and per group of consecutive
//! columns, plus the round-to-nearest (RTN) baseline.
//!
//! A grid maps a weight `w` to the code
//! `clamp(round_half_even(w / scale) + zero, 0, 2^bits − 1)` and a code back to
//! `scale · (code − zero)`.

use crate::error::{QuantError, Result};
use crate::tensor::{DenseMatrix, Precision};

pub const SUPPORTED_BITS: [u32; 4] = [2, 3, 4, 8];

/// Range used for constant inputs, where min == max.
pub const DEGENERATE_RANGE: f64 = 1e-8;

pub fn check_bits(bits: u32) -> Result<()> {
    if SUPPORTED_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(QuantError::UnsupportedBits(bits))
    }
}

#[inline]
pub fn max_code(bits: u32) -> u32 {
    (1u32 << bits) - 1
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QuantGrid {
    bits: u32,
    scale: f32,
    zero: u32,
}

impl QuantGrid {
    pub fn new(bits: u32, scale: f32, zero: u32) -> Result<Self> {
        check_bits(bits)?;
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(QuantError::InvalidConfig(format!(
                "grid scale must be positive and finite, got {scale}"
            )));
        }
        if zero > max_code(bits) {
            return Err(QuantError::CodeOutOfRange { code: zero, bits });
        }
        Ok(Self { bits, scale, zero })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn scale(&self) -> f32 {
        self.scale
    }

    pub fn zero(&self) -> u32 {
        self.zero
    }

    #[inline]
    pub fn quantize(&self, w: f64) -> u8 {
        let q = (w / self.scale as f64).round_ties_even() + self.zero as f64;
        q.clamp(0.0, max_code(self.bits) as f64) as u8
    }

    #[inline]
    pub fn dequantize(&self, code: u8) -> f64 {
        self.scale as f64 * (code as f64 - self.zero as f64)
    }
}

/// Min-max fit. Statistics are taken in `f64`; the zero-point is derived from
/// the unrounded scale, which is then stored as `f32`.
pub fn fit_grid(values: &[f64], bits: u32) -> Result<QuantGrid> {
    check_bits(bits)?;
    if values.is_empty() {
        return Err(QuantError::EmptyInput);
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(QuantError::NonFinite(i));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let maxq = max_code(bits) as f64;
    let range = if hi > lo { hi - lo } else { DEGENERATE_RANGE };
    let mut scale = range / maxq;
    if !(scale as f32 > 0.0) {
        scale = f32::MIN_POSITIVE as f64;
    }
    let zero = (-lo / scale).round_ties_even().clamp(0.0, maxq) as u32;
    QuantGrid::new(bits, scale as f32, zero)
}

pub fn quantize_value(w: f64, grid: &QuantGrid) -> u8 {
    grid.quantize(w)
}

pub fn dequantize_value(code: u32, grid: &QuantGrid) -> Result<f64> {
    if code > max_code(grid.bits) {
        return Err(QuantError::CodeOutOfRange {
            code,
            bits: grid.bits,
        });
    }
    Ok(grid.dequantize(code as u8))
}

/// Per-row, per-group grids. `group_size == 0` means one group per row.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GroupGrids {
    rows: usize,
    cols: usize,
    group_size: usize,
    grids: Vec<QuantGrid>,
}

/// Columns per group once `0` and oversize values are resolved.
pub fn effective_group_size(cols: usize, group_size: usize) -> usize {
    if group_size == 0 || group_size >= cols {
        cols.max(1)
    } else {
        group_size
    }
}

pub fn groups_per_row(cols: usize, group_size: usize) -> usize {
    cols.div_ceil(effective_group_size(cols, group_size))
}

impl GroupGrids {
    /// `grids` is row-major: row `r`, group `g` at `r * groups_per_row + g`.
    pub fn new(rows: usize, cols: usize, group_size: usize, grids: Vec<QuantGrid>) -> Result<Self> {
        let expected = rows * groups_per_row(cols, group_size);
        if grids.len() != expected {
            return Err(QuantError::DimensionMismatch(format!(
                "{} grids for {rows} rows x {} groups",
                grids.len(),
                groups_per_row(cols, group_size)
            )));
        }
        if let Some(first) = grids.first() {
            if grids.iter().any(|g| g.bits != first.bits) {
                return Err(QuantError::InvalidConfig("mixed bit-widths".into()));
            }
        }
        Ok(Self {
            rows,
            cols,
            group_size,
            grids,
        })
    }

    /// Fits every group of every row from `w`.
    pub fn fit(w: &DenseMatrix, bits: u32, group_size: usize) -> Result<Self> {
        let (rows, cols) = w.shape();
        let gs = effective_group_size(cols, group_size);
        let mut grids = Vec::with_capacity(rows * groups_per_row(cols, group_size));
        for r in 0..rows {
            for chunk in w.row(r).chunks(gs) {
                grids.push(fit_grid(chunk, bits)?);
            }
        }
        Self::new(rows, cols, group_size, grids)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn effective_group_size(&self) -> usize {
        effective_group_size(self.cols, self.group_size)
    }

    pub fn groups_per_row(&self) -> usize {
        groups_per_row(self.cols, self.group_size)
    }

    pub fn bits(&self) -> Option<u32> {
        self.grids.first().map(|g| g.bits)
    }

    pub fn all(&self) -> &[QuantGrid] {
        &self.grids
    }

    #[inline]
    pub fn group(&self, row: usize, group: usize) -> &QuantGrid {
        &self.grids[row * self.groups_per_row() + group]
    }

    #[inline]
    pub fn grid_for(&self, row: usize, col: usize) -> &QuantGrid {
        self.group(row, col / self.effective_group_size())
    }

    pub fn row_grids(&self, row: usize) -> &[QuantGrid] {
        let g = self.groups_per_row();
        &self.grids[row * g..(row + 1) * g]
    }
}

/// Integer codes and the grids that decode them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    codes: Vec<u8>,
    grids: GroupGrids,
    bits: u32,
}

impl QuantizedLayer {
    pub fn new(codes: Vec<u8>, grids: GroupGrids, bits: u32) -> Result<Self> {
        check_bits(bits)?;
        if codes.len() != grids.rows * grids.cols {
            return Err(QuantError::DimensionMismatch(format!(
                "{} codes for a {}x{} layer",
                codes.len(),
                grids.rows,
                grids.cols
            )));
        }
        if grids.bits().is_some_and(|b| b != bits) {
            return Err(QuantError::InvalidConfig(
                "grid bit-width differs from layer".into(),
            ));
        }
        let maxq = max_code(bits);
        if let Some(&c) = codes.iter().find(|&&c| c as u32 > maxq) {
            return Err(QuantError::CodeOutOfRange {
                code: c as u32,
                bits,
            });
        }
        Ok(Self { codes, grids, bits })
    }

    pub fn rows(&self) -> usize {
        self.grids.rows
    }

    pub fn cols(&self) -> usize {
        self.grids.cols
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn grids(&self) -> &GroupGrids {
        &self.grids
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn code(&self, r: usize, c: usize) -> u8 {
        self.codes[r * self.cols() + c]
    }

    pub fn row_codes(&self, r: usize) -> &[u8] {
        &self.codes[r * self.cols()..(r + 1) * self.cols()]
    }

    /// Dequantized weights `Ŵ` in `f64`, without the final `f32` rounding.
    pub fn dequantize_f64(&self) -> DenseMatrix {
        let (rows, cols) = (self.rows(), self.cols());
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(self.grids.grid_for(r, c).dequantize(self.code(r, c)));
            }
        }
        DenseMatrix::from_vec(rows, cols, data, Precision::F64).expect("finite grid values")
    }
}

/// `Ŵ` as a float32 matrix.
pub fn dequantize_layer(q: &QuantizedLayer) -> DenseMatrix {
    q.dequantize_f64().with_precision(Precision::F32)
}

/// Round-to-nearest on grids fit from `w` itself.
pub fn rtn_quantize(w: &DenseMatrix, bits: u32, group_size: usize) -> Result<QuantizedLayer> {
    let grids = GroupGrids::fit(w, bits, group_size)?;
    let (rows, cols) = w.shape();
    let mut codes = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for (c, &v) in w.row(r).iter().enumerate() {
            codes.push(grids.grid_for(r, c).quantize(v));
        }
    }
    QuantizedLayer::new(codes, grids, bits)
}
