//! One-shot post-training weight quantization with second-order error
//! compensation.
//!
//! The crate quantizes the weight matrix `W` of a linear layer so that
//! `||W·X − Ŵ·X||²` stays small on calibration inputs `X`:
//!
//! - [`hessian`] builds `H = 2·X·Xᵀ`, dampens it and produces the upper Cholesky
//!   factor of `H⁻¹`.
//! - [`gptq`] runs the column-wise solver with lazily batched updates.
//! - [`obq`] is the greedy per-row reference and a brute-force oracle.
//! - [`grid`] holds the min-max grids and the round-to-nearest baseline.
//! - [`packfmt`] stores codes bit-packed and multiplies them with a vector
//!   without materializing `Ŵ`.
//! - [`pipeline`] quantizes a chain of layers, optionally feeding each layer
//!   the outputs of the already-quantized prefix.
//!
//! ```
//! use quantkit::{gptq, grid, rng::SeededRng, tensor::Precision};
//!
//! let mut rng = SeededRng::new(0);
//! let w = rng.normal_matrix(16, 32, 1.0, Precision::F32);
//! let x = rng.normal_matrix(32, 128, 1.0, Precision::F32);
//! let cfg = gptq::GptqConfig::new(4);
//! let (layer, report) = gptq::gptq_quantize_with_calibration(&w, &x, &cfg).unwrap();
//! assert_eq!(grid::dequantize_layer(&layer).shape(), (16, 32));
//! assert!(report.true_layer_error.unwrap() <= report.rtn_error.unwrap());
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod error;
pub mod gptq;
pub mod grid;
pub mod hessian;
pub mod obq;
pub mod packfmt;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{ErrorKind, QuantError, Result};
pub use gptq::{gptq_quantize, gptq_quantize_with_calibration, GptqConfig, QuantizeReport};
pub use grid::{dequantize_layer, rtn_quantize, GroupGrids, QuantGrid, QuantizedLayer};
pub use hessian::{cholesky_upper, invert_spd, CholeskyFactor, HessianAccumulator};
pub use packfmt::{pack, qmatvec, unpack, PackedWeights};
pub use tensor::{DenseMatrix, Precision};
