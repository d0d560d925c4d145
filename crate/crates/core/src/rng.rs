//! Deterministic random fixtures.
//!
//! The generator is ChaCha8 (`rand_chacha::ChaCha8Rng`), whose output stream
//! is fixed by its specification and therefore identical on every platform.
//! Uniform doubles take the top 53 bits of a `u64`. Standard normals use the
//! Box–Muller transform on two uniforms, emitting the cosine branch
//! first and caching the sine branch for the next call.

use std::f64::consts::PI;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{DenseMatrix, Precision};

/// Named stream offsets so that calibration and evaluation data drawn from the
/// same seed never overlap.
pub mod streams {
    pub const WEIGHTS: u64 = 0;
    pub const CALIBRATION: u64 = 1;
    pub const EVALUATION: u64 = 2;
}

#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Independent stream `stream` derived from the same seed.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            inner,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        (self.uniform() * n as f64) as usize % n.max(1)
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] keeps the logarithm finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * PI * u2;
        self.spare_normal = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn normal_vec(&mut self, len: usize, std: f64) -> Vec<f64> {
        (0..len).map(|_| std * self.standard_normal()).collect()
    }

    /// Matrix of i.i.d. `N(0, std²)` entries, filled row-major.
    pub fn normal_matrix(
        &mut self,
        rows: usize,
        cols: usize,
        std: f64,
        precision: Precision,
    ) -> DenseMatrix {
        let data = self.normal_vec(rows * cols, std);
        DenseMatrix::from_vec(rows, cols, data, precision)
            .expect("generated data is finite and correctly sized")
    }
}
