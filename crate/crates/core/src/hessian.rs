//! Layer Hessian `H = 2·X·Xᵀ`, dampening, SPD inversion and the upper
//! Cholesky factor of `H⁻¹` that drives the column solver.
//!
//! [`ge_downdate`] removes one row/column from an inverse Hessian by a single
//! Gaussian-elimination step. The production solver never calls it; it is
//! the reference the Cholesky route is checked against, and the engine of the
//! greedy [`crate::obq`] solver.

use crate::error::{QuantError, Result};
use crate::tensor::{DenseMatrix, Precision};

/// Dampening used when the mean diagonal of `H` is zero.
pub const DAMP_FLOOR: f64 = 1e-8;
/// Dampening retries after the first attempt; the fraction grows 10x each time.
pub const MAX_DAMP_RETRIES: usize = 3;
/// Smallest pivot magnitude [`ge_downdate`] accepts.
pub const MIN_PIVOT: f64 = 1e-12;

/// Running sum of `2·Xc·Xcᵀ` over calibration chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianAccumulator {
    dim: usize,
    h: Vec<f64>,
    nsamples: usize,
}

impl HessianAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            h: vec![0.0; dim * dim],
            nsamples: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nsamples(&self) -> usize {
        self.nsamples
    }

    /// Adds `2·Xc·Xcᵀ` for a `dim × n` chunk of calibration columns.
    pub fn accumulate(&mut self, x_chunk: &DenseMatrix) -> Result<()> {
        if x_chunk.rows() != self.dim {
            return Err(QuantError::DimensionMismatch(format!(
                "calibration chunk has {} rows, Hessian dimension is {}",
                x_chunk.rows(),
                self.dim
            )));
        }
        let n = self.dim;
        for i in 0..n {
            let xi = x_chunk.row(i);
            for j in i..n {
                let v = self.h[i * n + j] + 2.0 * dot(xi, x_chunk.row(j));
                self.h[i * n + j] = v;
                self.h[j * n + i] = v;
            }
        }
        self.nsamples += x_chunk.cols();
        Ok(())
    }

    /// Accumulates `x` in chunks of at most `chunk_cols` columns.
    pub fn accumulate_chunked(&mut self, x: &DenseMatrix, chunk_cols: usize) -> Result<()> {
        let step = chunk_cols.max(1);
        let mut start = 0;
        while start < x.cols() {
            let end = (start + step).min(x.cols());
            self.accumulate(&x.col_range(start, end))?;
            start = end;
        }
        Ok(())
    }

    pub fn hessian(&self) -> DenseMatrix {
        DenseMatrix::from_vec(self.dim, self.dim, self.h.clone(), Precision::F64)
            .expect("accumulated Hessian is finite")
    }

    pub fn mean_diagonal(&self) -> f64 {
        if self.dim == 0 {
            return 0.0;
        }
        (0..self.dim).map(|i| self.h[i * self.dim + i]).sum::<f64>() / self.dim as f64
    }

    /// `H + λI` with `λ = fraction · mean(diag H)`, or [`DAMP_FLOOR`] when that
    /// mean is zero.
    pub fn dampen(&self, fraction: f64) -> DenseMatrix {
        let lambda = damp_lambda(self.mean_diagonal(), fraction);
        let mut h = self.hessian();
        for i in 0..self.dim {
            let v = h.get(i, i) + lambda;
            h.set(i, i, v);
        }
        h
    }
}

/// Four independent partial sums; fixed lane assignment keeps it deterministic.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let k = c * 4;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut tail = 0.0;
    for k in chunks * 4..a.len() {
        tail += a[k] * b[k];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn damp_lambda(mean_diag: f64, fraction: f64) -> f64 {
    let lambda = fraction * mean_diag;
    if lambda > 0.0 && lambda.is_finite() {
        lambda
    } else {
        DAMP_FLOOR
    }
}

/// Upper-triangular `T` with `Tᵀ·T = A`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    t: DenseMatrix,
}

impl CholeskyFactor {
    /// Wraps an existing upper-triangular matrix with positive diagonal.
    pub fn from_upper(t: DenseMatrix) -> Result<Self> {
        let n = t.rows();
        if t.cols() != n {
            return Err(QuantError::DimensionMismatch(
                "factor must be square".into(),
            ));
        }
        for i in 0..n {
            if !(t.get(i, i) > 0.0) {
                return Err(QuantError::NotPositiveDefinite { pivot: i });
            }
            if (0..i).any(|j| t.get(i, j) != 0.0) {
                return Err(QuantError::InvalidConfig(format!(
                    "factor row {i} has entries below the diagonal"
                )));
            }
        }
        Ok(Self {
            t: t.with_precision(Precision::F64),
        })
    }

    pub fn dim(&self) -> usize {
        self.t.rows()
    }

    pub fn t(&self) -> &DenseMatrix {
        &self.t
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.t.get(i, j)
    }

    /// `Tᵀ·T`.
    pub fn reconstruct(&self) -> DenseMatrix {
        crate::tensor::matmul_blocked(&self.t.transpose(), &self.t).expect("square factor")
    }
}

fn require_square(a: &DenseMatrix) -> Result<usize> {
    if a.rows() != a.cols() {
        return Err(QuantError::DimensionMismatch(format!(
            "expected a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    Ok(a.rows())
}

/// Right-looking Cholesky: row `i` of the result is the current pivot row
/// divided by the square root of its pivot, after which the trailing block is
/// updated by the outer product of that row.
pub fn cholesky_upper(a: &DenseMatrix) -> Result<CholeskyFactor> {
    let n = require_square(a)?;
    let mut u: Vec<f64> = a.data().to_vec();
    for i in 0..n {
        let pivot = u[i * n + i];
        if !(pivot > 0.0) || !pivot.is_finite() {
            return Err(QuantError::NotPositiveDefinite { pivot: i });
        }
        let d = pivot.sqrt();
        u[i * n + i] = d;
        for j in i + 1..n {
            u[i * n + j] /= d;
        }
        for j in 0..i {
            u[i * n + j] = 0.0;
        }
        let (head, tail) = u.split_at_mut((i + 1) * n);
        let row_i = &head[i * n..];
        for k in i + 1..n {
            let tik = row_i[k];
            if tik == 0.0 {
                continue;
            }
            let row_k = &mut tail[(k - i - 1) * n..(k - i) * n];
            for j in k..n {
                row_k[j] -= tik * row_i[j];
            }
        }
    }
    let t = DenseMatrix::from_vec(n, n, u, Precision::F64).map_err(|_| {
        QuantError::NotPositiveDefinite {
            pivot: n.saturating_sub(1),
        }
    })?;
    Ok(CholeskyFactor { t })
}

/// Inverse of a symmetric positive definite matrix through its Cholesky
/// factor, symmetrized on output.
pub fn invert_spd(h: &DenseMatrix) -> Result<DenseMatrix> {
    let n = require_square(h)?;
    // H = Tᵀ T  ⇒  H⁻¹ = T⁻¹ T⁻ᵀ.
    let t = cholesky_upper(h)?;
    let t = t.t().data();
    // Upper-triangular inverse of T, built row by row from the bottom.
    let mut inv = vec![0.0f64; n * n];
    let mut row = vec![0.0f64; n];
    for i in (0..n).rev() {
        row[i..].fill(0.0);
        row[i] = 1.0;
        for k in i + 1..n {
            let tik = t[i * n + k];
            if tik == 0.0 {
                continue;
            }
            let inv_k = &inv[k * n..(k + 1) * n];
            for j in k..n {
                row[j] -= tik * inv_k[j];
            }
        }
        let tii = t[i * n + i];
        for j in i..n {
            inv[i * n + j] = row[j] / tii;
        }
    }
    // H⁻¹[i][j] = Σ_k inv[i][k] inv[j][k] for k ≥ max(i, j).
    let mut out = vec![0.0f64; n * n];
    for i in 0..n {
        let ri = &inv[i * n..(i + 1) * n];
        for j in i..n {
            let rj = &inv[j * n..(j + 1) * n];
            let v = dot(&ri[j..], &rj[j..]);
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    DenseMatrix::from_vec(n, n, out, Precision::F64)
        .map_err(|_| QuantError::NotPositiveDefinite { pivot: 0 })
}

/// One Gaussian-elimination step on an inverse Hessian: returns
/// `(H⁻¹ − H⁻¹[:,q]·H⁻¹[q,:] / H⁻¹[q,q])` with row and column `q` removed.
pub fn ge_downdate(hinv: &DenseMatrix, q: usize) -> Result<DenseMatrix> {
    let n = require_square(hinv)?;
    if q >= n {
        return Err(QuantError::IndexOutOfRange { index: q, dim: n });
    }
    let d = hinv.get(q, q);
    if !(d.abs() >= MIN_PIVOT) {
        return Err(QuantError::PivotTooSmall { pivot: q, value: d });
    }
    let m = n - 1;
    let mut out = Vec::with_capacity(m * m);
    for i in (0..n).filter(|&i| i != q) {
        let hiq = hinv.get(i, q);
        let row = hinv.row(i);
        for j in (0..n).filter(|&j| j != q) {
            out.push(row[j] - hiq * hinv.get(q, j) / d);
        }
    }
    DenseMatrix::from_vec(m, m, out, Precision::F64)
}

/// Dampened `H`, its inverse and the upper Cholesky factor of that inverse,
/// escalating the dampening fraction 10x per failed attempt.
#[derive(Debug, Clone)]
pub struct InverseFactor {
    pub factor: CholeskyFactor,
    pub lambda: f64,
    pub retries: usize,
}

pub fn inverse_hessian_factor(acc: &HessianAccumulator, fraction: f64) -> Result<InverseFactor> {
    if !(fraction > 0.0) {
        return Err(QuantError::InvalidConfig(format!(
            "dampening fraction must be positive, got {fraction}"
        )));
    }
    let mut frac = fraction;
    let mut last_err = None;
    for retries in 0..=MAX_DAMP_RETRIES {
        let attempt = invert_spd(&acc.dampen(frac)).and_then(|hinv| cholesky_upper(&hinv));
        match attempt {
            Ok(factor) => {
                return Ok(InverseFactor {
                    factor,
                    lambda: damp_lambda(acc.mean_diagonal(), frac),
                    retries,
                })
            }
            Err(e) => last_err = Some(e),
        }
        frac *= 10.0;
    }
    Err(last_err.expect("at least one attempt"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{frobenius_sq_diff, matmul};

    fn m(rows: &[Vec<f64>]) -> DenseMatrix {
        DenseMatrix::from_rows(rows, Precision::F64).unwrap()
    }

    #[test]
    fn accumulate_examples() {
        let mut acc = HessianAccumulator::new(2);
        acc.accumulate(&m(&[vec![1.0], vec![0.0]])).unwrap();
        assert_eq!(acc.hessian(), m(&[vec![2.0, 0.0], vec![0.0, 0.0]]));
        acc.accumulate(&m(&[vec![0.0], vec![1.0]])).unwrap();
        assert_eq!(acc.hessian(), m(&[vec![2.0, 0.0], vec![0.0, 2.0]]));
        assert_eq!(acc.nsamples(), 2);

        let x = m(&[vec![1.0, 1.0], vec![1.0, -1.0]]);
        let mut acc = HessianAccumulator::new(2);
        acc.accumulate(&x).unwrap();
        let oracle = matmul(&x, &x.transpose()).unwrap().scale(2.0);
        assert_eq!(acc.hessian(), oracle);
        assert_eq!(acc.hessian(), m(&[vec![4.0, 0.0], vec![0.0, 4.0]]));
    }

    #[test]
    fn accumulate_rejects_wrong_rows() {
        let mut acc = HessianAccumulator::new(3);
        assert!(acc
            .accumulate(&DenseMatrix::zeros(2, 4, Precision::F64))
            .is_err());
    }

    #[test]
    fn dampen_examples() {
        let mut acc = HessianAccumulator::new(3);
        acc.h = DenseMatrix::diag(&[1.0, 2.0, 3.0], Precision::F64).into_data();
        let d = acc.dampen(0.01);
        assert_eq!(d.diagonal(), vec![1.02, 2.02, 3.02]);

        let zero = HessianAccumulator::new(2);
        assert_eq!(
            zero.dampen(0.01),
            DenseMatrix::diag(&[1e-8, 1e-8], Precision::F64)
        );

        let mut acc = HessianAccumulator::new(2);
        acc.h = vec![2.0, 2.0, 2.0, 2.0];
        let d = acc.dampen(0.01);
        assert_eq!(d, m(&[vec![2.02, 2.0], vec![2.0, 2.02]]));
        let det = d.get(0, 0) * d.get(1, 1) - d.get(0, 1) * d.get(1, 0);
        assert!((det - 0.0804).abs() < 1e-12);
    }

    #[test]
    fn invert_examples() {
        let i3 = DenseMatrix::identity(3, Precision::F64);
        assert_eq!(invert_spd(&i3).unwrap(), i3);
        let d = DenseMatrix::diag(&[2.0, 4.0], Precision::F64);
        let dinv = invert_spd(&d).unwrap();
        assert!(
            frobenius_sq_diff(&dinv, &DenseMatrix::diag(&[0.5, 0.25], Precision::F64)).unwrap()
                < 1e-28
        );

        let h = m(&[vec![2.02, 2.0], vec![2.0, 2.02]]);
        let inv = invert_spd(&h).unwrap();
        let det = 2.02 * 2.02 - 4.0;
        let closed = m(&[vec![2.02 / det, -2.0 / det], vec![-2.0 / det, 2.02 / det]]);
        for (a, b) in inv.data().iter().zip(closed.data()) {
            assert!((a - b).abs() <= 1e-8 * b.abs());
        }
        let prod = matmul(&h, &inv).unwrap();
        let eye = DenseMatrix::identity(2, Precision::F64);
        for (a, b) in prod.data().iter().zip(eye.data()) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(inv.is_symmetric());
    }

    #[test]
    fn invert_reports_failing_pivot() {
        let h = m(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert!(matches!(
            invert_spd(&h),
            Err(QuantError::NotPositiveDefinite { pivot: 1 })
        ));
    }

    #[test]
    fn cholesky_examples() {
        let i4 = DenseMatrix::identity(4, Precision::F64);
        assert_eq!(cholesky_upper(&i4).unwrap().t(), &i4);
        let d = DenseMatrix::diag(&[4.0, 9.0], Precision::F64);
        assert_eq!(
            cholesky_upper(&d).unwrap().t(),
            &DenseMatrix::diag(&[2.0, 3.0], Precision::F64)
        );
        let a = m(&[vec![4.0, 2.0], vec![2.0, 5.0]]);
        let t = cholesky_upper(&a).unwrap();
        assert_eq!(t.t(), &m(&[vec![2.0, 1.0], vec![0.0, 2.0]]));
        assert_eq!(t.reconstruct(), a);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = m(&[vec![1.0, 0.0], vec![0.0, -1.0]]);
        assert!(matches!(
            cholesky_upper(&a),
            Err(QuantError::NotPositiveDefinite { pivot: 1 })
        ));
    }

    #[test]
    fn downdate_examples() {
        let h = m(&[vec![2.0, 1.0], vec![1.0, 1.0]]);
        assert_eq!(ge_downdate(&h, 0).unwrap(), m(&[vec![0.5]]));
        let d = DenseMatrix::diag(&[3.0, 7.0], Precision::F64);
        assert_eq!(ge_downdate(&d, 0).unwrap(), m(&[vec![7.0]]));
        let i3 = DenseMatrix::identity(3, Precision::F64);
        assert_eq!(
            ge_downdate(&i3, 1).unwrap(),
            DenseMatrix::identity(2, Precision::F64)
        );
    }

    #[test]
    fn downdate_errors() {
        let i2 = DenseMatrix::identity(2, Precision::F64);
        assert!(matches!(
            ge_downdate(&i2, 2),
            Err(QuantError::IndexOutOfRange { .. })
        ));
        let z = DenseMatrix::diag(&[0.0, 1.0], Precision::F64);
        assert!(matches!(
            ge_downdate(&z, 0),
            Err(QuantError::PivotTooSmall { pivot: 0, .. })
        ));
    }

    #[test]
    fn zero_calibration_degrades_to_scaled_identity() {
        let acc = HessianAccumulator::new(4);
        let inv = inverse_hessian_factor(&acc, 0.01).unwrap();
        assert_eq!(inv.retries, 0);
        assert_eq!(inv.lambda, DAMP_FLOOR);
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert_eq!(inv.factor.get(i, j), 0.0);
                }
            }
        }
    }
}
