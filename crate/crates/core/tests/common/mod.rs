#![allow(dead_code)]

use quantkit::grid::{fit_grid, GroupGrids, QuantizedLayer};
use quantkit::hessian::{ge_downdate, invert_spd, HessianAccumulator};
use quantkit::rng::{streams, SeededRng};
use quantkit::{DenseMatrix, Precision};

/// Seeded layer and calibration pair: `W` is `rows × cols`, `X` is `cols × samples`.
pub fn layer_instance(
    seed: u64,
    rows: usize,
    cols: usize,
    samples: usize,
) -> (DenseMatrix, DenseMatrix) {
    let w = SeededRng::with_stream(seed, streams::WEIGHTS).normal_matrix(
        rows,
        cols,
        1.0,
        Precision::F32,
    );
    let x = SeededRng::with_stream(seed, streams::CALIBRATION).normal_matrix(
        cols,
        samples,
        1.0,
        Precision::F32,
    );
    (w, x)
}

/// Calibration whose rows have disjoint supports, so `X·Xᵀ` is exactly diagonal.
pub fn orthogonal_calibration(seed: u64, cols: usize, samples: usize) -> DenseMatrix {
    let mut rng = SeededRng::with_stream(seed, streams::CALIBRATION);
    let mut x = DenseMatrix::zeros(cols, samples, Precision::F64);
    for c in 0..samples {
        x.set(c % cols, c, 0.5 + rng.uniform());
    }
    x
}

pub fn dampened_hessian(x: &DenseMatrix, fraction: f64) -> DenseMatrix {
    let mut acc = HessianAccumulator::new(x.rows());
    acc.accumulate(x).unwrap();
    acc.dampen(fraction)
}

/// Column-by-column solver written directly from the two OBS formulas:
/// quantize column 0 of what is left, push `−(w − q)/[H⁻¹]₀₀ · H⁻¹[0,:]` onto
/// the remaining weights, then eliminate that column from `H⁻¹`.
/// Whole-row grids fit on the original weights.
pub fn unbatched_gptq(
    w: &DenseMatrix,
    h_damped: &DenseMatrix,
    bits: u32,
) -> (QuantizedLayer, Vec<Vec<f64>>) {
    let (rows, n) = w.shape();
    let grids = GroupGrids::new(
        rows,
        n,
        0,
        (0..rows)
            .map(|r| fit_grid(w.row(r), bits).unwrap())
            .collect(),
    )
    .unwrap();
    let mut work: Vec<Vec<f64>> = (0..rows).map(|r| w.row(r).to_vec()).collect();
    let mut codes = vec![0u8; rows * n];
    let mut hinv = invert_spd(h_damped).unwrap();
    for j in 0..n {
        let d = hinv.get(0, 0);
        for (r, row) in work.iter_mut().enumerate() {
            let grid = grids.group(r, 0);
            let code = grid.quantize(row[j]);
            codes[r * n + j] = code;
            let ratio = (row[j] - grid.dequantize(code)) / d;
            for (k, wk) in row.iter_mut().enumerate().skip(j + 1) {
                *wk -= ratio * hinv.get(0, k - j);
            }
        }
        if j + 1 < n {
            hinv = ge_downdate(&hinv, 0).unwrap();
        }
    }
    (QuantizedLayer::new(codes, grids, bits).unwrap(), work)
}

pub fn geometric_mean(values: &[f64]) -> f64 {
    (values.iter().map(|v| v.ln()).sum::<f64>() / values.len() as f64).exp()
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}
