//! Column-wise second-order quantization of a linear layer.
//!
//! All rows are quantized in the same fixed column order, so the inverse
//! Hessian information needed for column `j` is row `j` of the upper Cholesky
//! factor `T` of `H⁻¹`. For each column `j` and every row:
//!
//! ```text
//! q      = quant(w[j])
//! e      = (w[j] − dequant(q)) / T[j][j]
//! w[k]  −= e · T[j][k]        for every later column k
//! ```
//!
//! Updates to columns outside the current block of `B` columns are deferred
//! until the block is finished, then applied as a sequence of rank-1 updates
//! in the same `j` order. Every weight therefore sees exactly the same
//! floating-point operations for any block size, and the output is bitwise
//! independent of `B`.

use std::time::{Duration, Instant};

use num_traits::Float;
use rayon::prelude::*;

use crate::error::{QuantError, Result};
use crate::grid::{
    check_bits, dequantize_layer, effective_group_size, fit_grid, groups_per_row, rtn_quantize,
    GroupGrids, QuantGrid, QuantizedLayer,
};
use crate::hessian::{inverse_hessian_factor, CholeskyFactor, HessianAccumulator};
use crate::tensor::{frobenius_sq_diff, matmul_blocked, DenseMatrix, Precision};

pub const DEFAULT_BLOCK_SIZE: usize = 128;
pub const DEFAULT_DAMP_FRACTION: f64 = 0.01;
/// Calibration columns per Hessian accumulation call.
pub const CALIBRATION_CHUNK: usize = 32;

/// Rows handled together by one worker; `T` rows are reused across them.
const ROW_TILE: usize = 16;

/// Where group grids come from when the solver reaches a group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupGridPolicy {
    /// Fit every grid from the caller's weights before any update.
    OriginalWeights,
    /// Fit a group's grid from the error-compensated weights at the moment
    /// its first column is reached.
    #[default]
    RefitAtBlockEntry,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GptqConfig {
    pub bits: u32,
    pub group_size: usize,
    pub block_size: usize,
    pub damp_fraction: f64,
    pub precision: Precision,
    pub group_policy: GroupGridPolicy,
}

impl GptqConfig {
    pub fn new(bits: u32) -> Self {
        Self {
            bits,
            group_size: 0,
            block_size: DEFAULT_BLOCK_SIZE,
            damp_fraction: DEFAULT_DAMP_FRACTION,
            precision: Precision::F32,
            group_policy: GroupGridPolicy::default(),
        }
    }

    pub fn group_size(mut self, group_size: usize) -> Self {
        self.group_size = group_size;
        self
    }

    pub fn block_size(mut self, block_size: usize) -> Self {
        self.block_size = block_size;
        self
    }

    pub fn damp_fraction(mut self, fraction: f64) -> Self {
        self.damp_fraction = fraction;
        self
    }

    pub fn precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn group_policy(mut self, policy: GroupGridPolicy) -> Self {
        self.group_policy = policy;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits)?;
        if self.block_size == 0 {
            return Err(QuantError::InvalidConfig(
                "block size must be at least 1".into(),
            ));
        }
        if !(self.damp_fraction > 0.0) || !self.damp_fraction.is_finite() {
            return Err(QuantError::InvalidConfig(format!(
                "dampening fraction must be positive, got {}",
                self.damp_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct QuantizeReport {
    /// `Σ (w − ŵ)²` at the moment each weight was quantized.
    pub layer_error_proxy: f64,
    /// `||W·X − Ŵ·X||²`, when calibration inputs were supplied.
    pub true_layer_error: Option<f64>,
    /// The same quantity for round-to-nearest.
    pub rtn_error: Option<f64>,
    /// Excluded from serialized reports so they stay reproducible.
    #[serde(skip)]
    pub wall_time: Duration,
    pub damp_retries: usize,
}

/// Quantizes `w` (`d_row × d_col`) given the upper Cholesky factor of the
/// dampened inverse Hessian.
pub fn gptq_quantize(
    w: &DenseMatrix,
    hinv_chol: &CholeskyFactor,
    cfg: &GptqConfig,
) -> Result<(QuantizedLayer, QuantizeReport)> {
    cfg.validate()?;
    if w.cols() != hinv_chol.dim() {
        return Err(QuantError::DimensionMismatch(format!(
            "weights have {} columns, inverse Hessian factor has dimension {}",
            w.cols(),
            hinv_chol.dim()
        )));
    }
    if w.cols() == 0 {
        return Err(QuantError::EmptyInput);
    }
    let start = Instant::now();
    let (codes, grids, proxy) = match cfg.precision {
        Precision::F32 => solve::<f32>(w, hinv_chol, cfg)?,
        Precision::F64 => solve::<f64>(w, hinv_chol, cfg)?,
    };
    let grids = GroupGrids::new(w.rows(), w.cols(), cfg.group_size, grids)?;
    let layer = QuantizedLayer::new(codes, grids, cfg.bits)?;
    let report = QuantizeReport {
        layer_error_proxy: proxy,
        wall_time: start.elapsed(),
        ..QuantizeReport::default()
    };
    Ok((layer, report))
}

/// Builds the Hessian from calibration inputs `x` (`d_col × m`), dampens,
/// inverts, factors and runs [`gptq_quantize`]. Fills the layer error
/// `||W·X − Ŵ·X||²` for both the result and round-to-nearest on the same inputs.
pub fn gptq_quantize_with_calibration(
    w: &DenseMatrix,
    x: &DenseMatrix,
    cfg: &GptqConfig,
) -> Result<(QuantizedLayer, QuantizeReport)> {
    cfg.validate()?;
    if x.rows() != w.cols() {
        return Err(QuantError::DimensionMismatch(format!(
            "calibration has {} rows, weights have {} columns",
            x.rows(),
            w.cols()
        )));
    }
    if x.cols() == 0 {
        return Err(QuantError::EmptyInput);
    }
    let start = Instant::now();
    let mut acc = HessianAccumulator::new(w.cols());
    acc.accumulate_chunked(x, CALIBRATION_CHUNK)?;
    let inverse = inverse_hessian_factor(&acc, cfg.damp_fraction)?;
    let (layer, mut report) = gptq_quantize(w, &inverse.factor, cfg)?;
    report.damp_retries = inverse.retries;
    report.wall_time = start.elapsed();

    report.true_layer_error = Some(layer_error(w, &layer, x)?);
    let rtn = rtn_quantize(w, cfg.bits, cfg.group_size)?;
    report.rtn_error = Some(layer_error(w, &rtn, x)?);
    Ok((layer, report))
}

/// `||W·X − Ŵ·X||²` with `Ŵ` the float32 dequantized layer.
pub fn layer_error(w: &DenseMatrix, q: &QuantizedLayer, x: &DenseMatrix) -> Result<f64> {
    let w_hat = dequantize_layer(q);
    if w_hat.shape() != w.shape() {
        return Err(QuantError::DimensionMismatch(format!(
            "{:?} vs {:?}",
            w.shape(),
            w_hat.shape()
        )));
    }
    let diff = DenseMatrix::from_vec(
        w.rows(),
        w.cols(),
        w.data()
            .iter()
            .zip(w_hat.data())
            .map(|(a, b)| a - b)
            .collect(),
        Precision::F64,
    )?;
    let dx = matmul_blocked(&diff, &x.with_precision(Precision::F64))?;
    frobenius_sq_diff(
        &dx,
        &DenseMatrix::zeros(dx.rows(), dx.cols(), Precision::F64),
    )
}

type SolveOutput = (Vec<u8>, Vec<QuantGrid>, f64);

fn solve<F>(w: &DenseMatrix, chol: &CholeskyFactor, cfg: &GptqConfig) -> Result<SolveOutput>
where
    F: Float + Send + Sync,
{
    let (rows, n) = w.shape();
    let gs = effective_group_size(n, cfg.group_size);
    let groups = groups_per_row(n, cfg.group_size);
    let block = cfg.block_size.min(n);

    let t: Vec<F> = chol.t().data().iter().map(|&v| cast(v)).collect();
    for j in 0..n {
        if !(t[j * n + j] > F::zero()) {
            return Err(QuantError::NotPositiveDefinite { pivot: j });
        }
    }

    let mut work: Vec<F> = w.data().iter().map(|&v| cast(v)).collect();
    let mut codes = vec![0u8; rows * n];
    let mut grids = match cfg.group_policy {
        GroupGridPolicy::OriginalWeights => {
            GroupGrids::fit(w, cfg.bits, cfg.group_size)?.all().to_vec()
        }
        GroupGridPolicy::RefitAtBlockEntry => {
            vec![QuantGrid::new(cfg.bits, 1.0, 0)?; rows * groups]
        }
    };

    let solver = TileSolver {
        t: &t,
        n,
        block,
        group_size: gs,
        groups,
        bits: cfg.bits,
        refit: cfg.group_policy == GroupGridPolicy::RefitAtBlockEntry,
    };

    let proxies: Vec<Result<f64>> = work
        .par_chunks_mut(ROW_TILE * n)
        .zip(codes.par_chunks_mut(ROW_TILE * n))
        .zip(grids.par_chunks_mut(ROW_TILE * groups))
        .map(|((w_tile, c_tile), g_tile)| solver.run(w_tile, c_tile, g_tile))
        .collect();
    let mut proxy = 0.0;
    for p in proxies {
        proxy += p?;
    }
    Ok((codes, grids, proxy))
}

#[inline]
fn cast<F: Float>(v: f64) -> F {
    F::from(v).expect("finite value fits the working precision")
}

struct TileSolver<'a, F> {
    t: &'a [F],
    n: usize,
    block: usize,
    group_size: usize,
    groups: usize,
    bits: u32,
    refit: bool,
}

impl<F: Float> TileSolver<'_, F> {
    /// Quantizes a tile of consecutive rows in place. Rows never interact.
    fn run(&self, w: &mut [F], codes: &mut [u8], grids: &mut [QuantGrid]) -> Result<f64> {
        let n = self.n;
        let rows = w.len() / n;
        let t = self.t;
        let mut err = vec![F::zero(); rows * self.block];
        let mut scratch = vec![0.0f64; self.group_size];
        let mut proxy = 0.0f64;

        let mut i = 0;
        while i < n {
            let end = (i + self.block).min(n);
            let width = end - i;
            for j in i..end {
                if self.refit && j % self.group_size == 0 {
                    let g_end = (j + self.group_size).min(n);
                    for r in 0..rows {
                        let row = &w[r * n..(r + 1) * n];
                        let errs = &err[r * self.block..r * self.block + (j - i)];
                        let values = &mut scratch[..g_end - j];
                        for (k, v) in (j..g_end).zip(values.iter_mut()) {
                            *v = self.current_value(row, errs, i, k, end).to_f64().unwrap();
                        }
                        grids[r * self.groups + j / self.group_size] = fit_grid(values, self.bits)?;
                    }
                }

                let tjj = t[j * n + j];
                let t_row = &t[j * n..(j + 1) * n];
                for r in 0..rows {
                    let grid = &grids[r * self.groups + j / self.group_size];
                    let row = &mut w[r * n..(r + 1) * n];
                    let wj = row[j];
                    let code = grid.quantize(wj.to_f64().unwrap());
                    let deq: F = cast(grid.dequantize(code));
                    codes[r * n + j] = code;
                    let diff = wj - deq;
                    let d64 = diff.to_f64().unwrap();
                    proxy += d64 * d64;
                    let e = diff / tjj;
                    err[r * self.block + (j - i)] = e;
                    for k in j + 1..end {
                        row[k] = row[k] - e * t_row[k];
                    }
                }
            }

            // Deferred updates for every column after the block.
            if end < n {
                for jj in 0..width {
                    let t_row = &t[(i + jj) * n + end..(i + jj + 1) * n];
                    for r in 0..rows {
                        let e = err[r * self.block + jj];
                        let tail = &mut w[r * n + end..(r + 1) * n];
                        for (v, &tv) in tail.iter_mut().zip(t_row) {
                            *v = *v - e * tv;
                        }
                    }
                }
            }
            i = end;
        }
        Ok(proxy)
    }

    /// Value of column `k` once every update from columns before the current
    /// one has been applied, reproducing the deferred-update arithmetic.
    #[inline]
    fn current_value(
        &self,
        row: &[F],
        errs: &[F],
        block_start: usize,
        k: usize,
        block_end: usize,
    ) -> F {
        let mut v = row[k];
        if k >= block_end {
            for (jj, &e) in errs.iter().enumerate() {
                v = v - e * self.t[(block_start + jj) * self.n + k];
            }
        }
        v
    }
}
