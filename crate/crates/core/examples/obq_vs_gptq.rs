//! Greedy OBQ against fixed-order GPTQ on the same layer, with the brute-force
//! optimum for a few tiny rows.

use std::time::Instant;

use quantkit::grid::fit_grid;
use quantkit::hessian::{invert_spd, HessianAccumulator};
use quantkit::obq::{exhaustive_optimal, obq_quantize_row, quadratic_row_error, RowGrids};
use quantkit::pipeline::{quantize_layer, Method};
use quantkit::rng::SeededRng;
use quantkit::{GptqConfig, Precision};

fn main() -> quantkit::Result<()> {
    let mut rng = SeededRng::new(3);
    let w = rng.normal_matrix(64, 64, 1.0, Precision::F32);
    let x = rng.normal_matrix(64, 128, 1.0, Precision::F32);
    let cfg = GptqConfig::new(3);
    for method in [Method::Rtn, Method::Gptq, Method::Obq] {
        let start = Instant::now();
        let (_, report) = quantize_layer(&w, &x, method, &cfg)?;
        println!(
            "{method:?}: error {:.4} in {:.1?}",
            report.true_layer_error.unwrap(),
            start.elapsed()
        );
    }

    println!();
    for seed in 0..5 {
        let mut rng = SeededRng::new(100 + seed);
        let w = rng.normal_vec(4, 1.0);
        let x = rng.normal_matrix(4, 12, 1.0, Precision::F64);
        let mut acc = HessianAccumulator::new(4);
        acc.accumulate(&x)?;
        let h = acc.dampen(0.01);
        let grid = fit_grid(&w, 2)?;
        let grids = RowGrids::single(&grid);
        let (codes, trace) = obq_quantize_row(&w, &invert_spd(&h)?, grids)?;
        let (best_codes, best) = exhaustive_optimal(&w, &h, grids)?;
        println!(
            "row {seed}: obq {:?} order {:?} error {:.5} | optimum {:?} error {best:.5}",
            codes,
            trace.order,
            quadratic_row_error(&w, &codes, &h, grids),
            best_codes
        );
    }
    Ok(())
}
