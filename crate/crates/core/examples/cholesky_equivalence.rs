//! Eliminating columns of an inverse Hessian one at a time produces, row by
//! row, the upper Cholesky factor of that inverse up to a square-root scale.

use quantkit::hessian::{cholesky_upper, ge_downdate, invert_spd, HessianAccumulator};
use quantkit::rng::SeededRng;
use quantkit::Precision;

fn main() -> quantkit::Result<()> {
    let n = 12;
    let x = SeededRng::new(1).normal_matrix(n, 3 * n, 1.0, Precision::F64);
    let mut acc = HessianAccumulator::new(n);
    acc.accumulate(&x)?;
    let hinv = invert_spd(&acc.dampen(0.01))?;
    let t = cholesky_upper(&hinv)?;

    let mut m = hinv;
    let mut worst = 0.0f64;
    for k in 0..n {
        let pivot = m.get(0, 0).sqrt();
        let dev = (k..n)
            .map(|c| (m.get(0, c - k) / pivot - t.get(k, c)).abs())
            .fold(0.0, f64::max);
        println!(
            "step {k:>2}: pivot {pivot:.6}  T[{k},{k}] {:.6}  max row deviation {dev:.2e}",
            t.get(k, k)
        );
        worst = worst.max(dev);
        if k + 1 < n {
            m = ge_downdate(&m, 0)?;
        }
    }
    println!("worst deviation {worst:.2e}");
    Ok(())
}
