//! Dense row-major matrices and the GMAT binary file format.
//!
//! Elements are held as `f64` internally. A matrix tagged [`Precision::F32`]
//! only ever holds values that are exactly representable as `f32`, so a file
//! roundtrip is bit-exact for both tags.
//!
//! GMAT layout (little-endian):
//!
//! ```text
//! magic   4 bytes  "GMAT"
//! version u32      1
//! dtype   u8       0 = f32, 1 = f64
//! rows    u64
//! cols    u64
//! payload rows*cols elements, row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{QuantError, Result};

pub const GMAT_MAGIC: &[u8; 4] = b"GMAT";
pub const GMAT_VERSION: u32 = 1;
const GMAT_HEADER_LEN: usize = 4 + 4 + 1 + 8 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn wider(self, other: Precision) -> Precision {
        if self == Precision::F64 || other == Precision::F64 {
            Precision::F64
        } else {
            Precision::F32
        }
    }

    fn dtype_byte(self) -> u8 {
        match self {
            Precision::F32 => 0,
            Precision::F64 => 1,
        }
    }

    fn element_size(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    #[inline]
    fn round(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F64 => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    precision: Precision,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Builds a matrix, rounding to `f32` when tagged [`Precision::F32`].
    /// Rejects wrong lengths and non-finite elements.
    pub fn from_vec(
        rows: usize,
        cols: usize,
        mut data: Vec<f64>,
        precision: Precision,
    ) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(QuantError::DimensionMismatch(format!(
                "{} elements for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        for (i, v) in data.iter_mut().enumerate() {
            *v = precision.round(*v);
            if !v.is_finite() {
                return Err(QuantError::NonFinite(i));
            }
        }
        Ok(Self {
            rows,
            cols,
            precision,
            data,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], precision: Precision) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(QuantError::DimensionMismatch("ragged rows".into()));
        }
        Self::from_vec(r, c, rows.concat(), precision)
    }

    pub fn zeros(rows: usize, cols: usize, precision: Precision) -> Self {
        Self {
            rows,
            cols,
            precision,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize, precision: Precision) -> Self {
        let mut m = Self::zeros(n, n, precision);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64], precision: Precision) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n, precision);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = precision.round(*v);
        }
        m
    }

    /// Column vector from a slice.
    pub fn column(values: &[f64], precision: Precision) -> Self {
        let mut m = Self::zeros(values.len(), 1, precision);
        for (dst, v) in m.data.iter_mut().zip(values) {
            *dst = precision.round(*v);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Sets an element, rounding to the matrix precision.
    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = self.precision.round(v);
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col_vec(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols))
            .map(|i| self.get(i, i))
            .collect()
    }

    pub fn with_precision(&self, precision: Precision) -> Self {
        let data = self.data.iter().map(|&v| precision.round(v)).collect();
        Self {
            rows: self.rows,
            cols: self.cols,
            precision,
            data,
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows, self.precision);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn scale(&self, factor: f64) -> Self {
        let data = self
            .data
            .iter()
            .map(|&v| self.precision.round(v * factor))
            .collect();
        Self {
            rows: self.rows,
            cols: self.cols,
            precision: self.precision,
            data,
        }
    }

    /// Elementwise map, result rounded to the matrix precision.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let data = self
            .data
            .iter()
            .map(|&v| self.precision.round(f(v)))
            .collect();
        Self {
            rows: self.rows,
            cols: self.cols,
            precision: self.precision,
            data,
        }
    }

    /// Rows `start..end` as a new matrix.
    pub fn row_range(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            cols: self.cols,
            precision: self.precision,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Columns `start..end` as a new matrix.
    pub fn col_range(&self, start: usize, end: usize) -> Self {
        let w = end - start;
        let mut data = Vec::with_capacity(self.rows * w);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Self {
            rows: self.rows,
            cols: w,
            precision: self.precision,
            data,
        }
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Naive triple-loop product. Both operands are promoted to the wider
/// precision and accumulated in `f64`.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    check_inner(a, b)?;
    let precision = a.precision.wider(b.precision);
    let mut out = DenseMatrix::zeros(a.rows, b.cols, precision);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += a.get(i, k) * b.get(k, j);
            }
            out.data[i * b.cols + j] = precision.round(acc);
        }
    }
    Ok(out)
}

const BLOCK: usize = 64;

/// Cache-blocked product; agrees with [`matmul`] up to summation order.
pub fn matmul_blocked(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    check_inner(a, b)?;
    let precision = a.precision.wider(b.precision);
    let (n, m, p) = (a.rows, a.cols, b.cols);
    let mut acc = vec![0.0f64; n * p];
    for kk in (0..m).step_by(BLOCK) {
        let k_end = (kk + BLOCK).min(m);
        for i in 0..n {
            let out_row = &mut acc[i * p..(i + 1) * p];
            for k in kk..k_end {
                let aik = a.data[i * m + k];
                if aik == 0.0 {
                    continue;
                }
                let b_row = &b.data[k * p..(k + 1) * p];
                for (o, bv) in out_row.iter_mut().zip(b_row) {
                    *o += aik * bv;
                }
            }
        }
    }
    for v in &mut acc {
        *v = precision.round(*v);
    }
    Ok(DenseMatrix {
        rows: n,
        cols: p,
        precision,
        data: acc,
    })
}

fn check_inner(a: &DenseMatrix, b: &DenseMatrix) -> Result<()> {
    if a.cols != b.rows {
        return Err(QuantError::DimensionMismatch(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(())
}

/// Sum of squared elementwise differences, `||a - b||²`.
pub fn frobenius_sq_diff(a: &DenseMatrix, b: &DenseMatrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(QuantError::DimensionMismatch(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum())
}

pub fn encode_matrix(m: &DenseMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(GMAT_HEADER_LEN + m.data.len() * m.precision.element_size());
    out.extend_from_slice(GMAT_MAGIC);
    out.extend_from_slice(&GMAT_VERSION.to_le_bytes());
    out.push(m.precision.dtype_byte());
    out.extend_from_slice(&(m.rows as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols as u64).to_le_bytes());
    match m.precision {
        Precision::F32 => {
            for &v in &m.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Precision::F64 => {
            for &v in &m.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_matrix(bytes: &[u8]) -> Result<DenseMatrix> {
    if bytes.len() < 4 || &bytes[..4] != GMAT_MAGIC {
        return Err(QuantError::BadMagic {
            expected: "GMAT".into(),
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned(),
        });
    }
    if bytes.len() < GMAT_HEADER_LEN {
        return Err(QuantError::Truncated {
            expected: GMAT_HEADER_LEN,
            found: bytes.len(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != GMAT_VERSION {
        return Err(QuantError::BadVersion(version));
    }
    let precision = match bytes[8] {
        0 => Precision::F32,
        1 => Precision::F64,
        other => return Err(QuantError::BadDtype(other)),
    };
    let rows = u64::from_le_bytes(bytes[9..17].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[17..25].try_into().unwrap()) as usize;
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| QuantError::DimensionMismatch("element count overflows".into()))?;
    let expected = count
        .checked_mul(precision.element_size())
        .and_then(|n| n.checked_add(GMAT_HEADER_LEN))
        .ok_or_else(|| QuantError::DimensionMismatch("payload size overflows".into()))?;
    if bytes.len() < expected {
        return Err(QuantError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(QuantError::LengthMismatch {
            expected,
            found: bytes.len(),
        });
    }
    let payload = &bytes[GMAT_HEADER_LEN..];
    let data: Vec<f64> = match precision {
        Precision::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Precision::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    DenseMatrix::from_vec(rows, cols, data, precision)
}

pub fn write_matrix(path: impl AsRef<Path>, m: &DenseMatrix) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_matrix(m)).map_err(|e| QuantError::io(path, e))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| QuantError::io(path, e))?;
    decode_matrix(&bytes)
}
