//! Greedy per-row Optimal Brain Quantization and an exhaustive oracle.
//!
//! OBQ handles one row at a time: it repeatedly picks the remaining weight
//! whose rounding costs least, `argmin (quant(w_q) − w_q)² / [H⁻¹]_qq`,
//! compensates the others with
//! `δ = −(w_q − quant(w_q)) / [H⁻¹]_qq · H⁻¹[:, q]`, and removes `q` from the
//! inverse with [`ge_downdate`]. Cost is `O(d_col³)` per row.

use rayon::prelude::*;

use crate::error::{QuantError, Result};
use crate::grid::{effective_group_size, max_code, GroupGrids, QuantGrid, QuantizedLayer};
use crate::hessian::ge_downdate;
use crate::tensor::DenseMatrix;

/// Largest code-vector count [`exhaustive_optimal`] will enumerate.
pub const EXHAUSTIVE_LIMIT: u64 = 65_536;
pub const EXHAUSTIVE_MAX_COLS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct ObqTrace {
    /// Column indices in the order they were quantized.
    pub order: Vec<usize>,
    /// Selection score of each step.
    pub step_errors: Vec<f64>,
}

/// Grids for the columns of one row.
#[derive(Debug, Clone, Copy)]
pub struct RowGrids<'a> {
    grids: &'a [QuantGrid],
    group_size: usize,
}

impl<'a> RowGrids<'a> {
    /// `group_size` is in columns; `0` means a single grid for the whole row.
    pub fn new(grids: &'a [QuantGrid], group_size: usize, cols: usize) -> Result<Self> {
        let gs = effective_group_size(cols, group_size);
        if grids.len() != cols.div_ceil(gs) {
            return Err(QuantError::DimensionMismatch(format!(
                "{} grids for {cols} columns in groups of {gs}",
                grids.len()
            )));
        }
        Ok(Self {
            grids,
            group_size: gs,
        })
    }

    pub fn single(grid: &'a QuantGrid) -> Self {
        Self {
            grids: std::slice::from_ref(grid),
            group_size: usize::MAX,
        }
    }

    pub fn from_layer(grids: &'a GroupGrids, row: usize) -> Self {
        Self {
            grids: grids.row_grids(row),
            group_size: grids.effective_group_size(),
        }
    }

    #[inline]
    pub fn grid(&self, col: usize) -> &QuantGrid {
        &self.grids[col / self.group_size]
    }
}

fn check_square(m: &DenseMatrix, n: usize, what: &str) -> Result<()> {
    if m.rows() != n || m.cols() != n {
        return Err(QuantError::DimensionMismatch(format!(
            "{what} is {}x{}, row has {n} weights",
            m.rows(),
            m.cols()
        )));
    }
    Ok(())
}

pub fn obq_quantize_row(
    w_row: &[f64],
    hinv: &DenseMatrix,
    grids: RowGrids<'_>,
) -> Result<(Vec<u8>, ObqTrace)> {
    let n = w_row.len();
    check_square(hinv, n, "inverse Hessian")?;
    let mut codes = vec![0u8; n];
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut w = w_row.to_vec();
    let mut hinv = hinv.clone();
    let mut trace = ObqTrace {
        order: Vec::with_capacity(n),
        step_errors: Vec::with_capacity(n),
    };

    while !remaining.is_empty() {
        let mut best: Option<(usize, f64, u8, f64)> = None;
        for (l, (&col, &v)) in remaining.iter().zip(&w).enumerate() {
            let grid = grids.grid(col);
            let code = grid.quantize(v);
            let deq = grid.dequantize(code);
            let score = (deq - v) * (deq - v) / hinv.get(l, l);
            if best.is_none_or(|(_, s, _, _)| score < s) {
                best = Some((l, score, code, deq));
            }
        }
        let (l, score, code, deq) = best.expect("nonempty");
        let d = hinv.get(l, l);
        let err = w[l] - deq;
        let ratio = err / d;
        let hcol = hinv.row(l);
        for (m, wm) in w.iter_mut().enumerate() {
            if m != l {
                *wm -= ratio * hcol[m];
            }
        }
        codes[remaining[l]] = code;
        trace.order.push(remaining[l]);
        trace.step_errors.push(score);
        if remaining.len() > 1 {
            hinv = ge_downdate(&hinv, l)?;
        }
        remaining.remove(l);
        w.remove(l);
    }
    Ok((codes, trace))
}

/// Runs [`obq_quantize_row`] on every row against the given grids.
pub fn obq_quantize(
    w: &DenseMatrix,
    hinv: &DenseMatrix,
    grids: &GroupGrids,
) -> Result<(QuantizedLayer, Vec<ObqTrace>)> {
    if grids.rows() != w.rows() || grids.cols() != w.cols() {
        return Err(QuantError::DimensionMismatch(
            "grids do not match weights".into(),
        ));
    }
    check_square(hinv, w.cols(), "inverse Hessian")?;
    let bits = grids.bits().ok_or(QuantError::EmptyInput)?;
    let per_row: Vec<Result<(Vec<u8>, ObqTrace)>> = (0..w.rows())
        .into_par_iter()
        .map(|r| obq_quantize_row(w.row(r), hinv, RowGrids::from_layer(grids, r)))
        .collect();
    let mut codes = Vec::with_capacity(w.rows() * w.cols());
    let mut traces = Vec::with_capacity(w.rows());
    for row in per_row {
        let (c, t) = row?;
        codes.extend(c);
        traces.push(t);
    }
    Ok((QuantizedLayer::new(codes, grids.clone(), bits)?, traces))
}

/// `e·H·eᵀ` with `e = w − ŵ`.
pub fn quadratic_row_error(
    w_row: &[f64],
    codes: &[u8],
    h: &DenseMatrix,
    grids: RowGrids<'_>,
) -> f64 {
    let e: Vec<f64> = w_row
        .iter()
        .zip(codes)
        .enumerate()
        .map(|(c, (&w, &code))| w - grids.grid(c).dequantize(code))
        .collect();
    quadratic_form(&e, h)
}

pub fn quadratic_form(e: &[f64], h: &DenseMatrix) -> f64 {
    let mut total = 0.0;
    for (i, &ei) in e.iter().enumerate() {
        let row = h.row(i);
        let s: f64 = row.iter().zip(e).map(|(a, b)| a * b).sum();
        total += ei * s;
    }
    total
}

/// Global minimizer of `e·H·eᵀ` over all code vectors, ties going to the
/// lexicographically smallest vector.
pub fn exhaustive_optimal(
    w_row: &[f64],
    h: &DenseMatrix,
    grids: RowGrids<'_>,
) -> Result<(Vec<u8>, f64)> {
    let n = w_row.len();
    check_square(h, n, "Hessian")?;
    if n == 0 {
        return Err(QuantError::EmptyInput);
    }
    let levels: Vec<u32> = (0..n).map(|c| max_code(grids.grid(c).bits()) + 1).collect();
    let total = levels
        .iter()
        .try_fold(1u64, |acc, &l| acc.checked_mul(l as u64))
        .unwrap_or(u64::MAX);
    if n > EXHAUSTIVE_MAX_COLS || total > EXHAUSTIVE_LIMIT {
        return Err(QuantError::InstanceTooLarge(format!(
            "{n} columns, {total} code vectors"
        )));
    }

    let mut codes = vec![0u8; n];
    let mut best_codes = codes.clone();
    let mut best = f64::INFINITY;
    loop {
        let err = quadratic_row_error(w_row, &codes, h, grids);
        if err < best {
            best = err;
            best_codes.copy_from_slice(&codes);
        }
        // Odometer with column 0 most significant, so visits are lexicographic.
        let mut pos = n;
        loop {
            if pos == 0 {
                return Ok((best_codes, best));
            }
            pos -= 1;
            if (codes[pos] as u32) + 1 < levels[pos] {
                codes[pos] += 1;
                for c in &mut codes[pos + 1..] {
                    *c = 0;
                }
                break;
            }
        }
    }
}
