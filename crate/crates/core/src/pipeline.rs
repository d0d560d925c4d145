//! Sequential multi-layer quantization of toy MLPs.
//!
//! A model is a chain of linear layers `y = act(W·x)` described by a TOML
//! manifest:
//!
//! ```toml
//! name = "mlp"
//! seed = 7
//! calibration = "calibration.gmat"   # optional, d_in × m
//!
//! [[layers]]
//! weights = "layer_000.gmat"
//! rows = 64
//! cols = 64
//! activation = "relu"                # or "none"
//! ```
//!
//! Paths are relative to the manifest's directory. Layer `i`'s `rows` must
//! equal layer `i+1`'s `cols`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::gptq::{gptq_quantize_with_calibration, layer_error, GptqConfig, QuantizeReport};
use crate::grid::{dequantize_layer, rtn_quantize, GroupGrids, QuantizedLayer};
use crate::hessian::{invert_spd, HessianAccumulator};
use crate::obq::obq_quantize;
use crate::packfmt::{pack, PackedWeights};
use crate::rng::{streams, SeededRng};
use crate::tensor::{frobenius_sq_diff, matmul_blocked, read_matrix, DenseMatrix, Precision};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const REPORT_FILE: &str = "report.json";
pub const DEFAULT_CALIBRATION_COLS: usize = 128;
pub const DEFAULT_EVAL_COLS: usize = 128;
/// Largest input dimension the OBQ reference is run on.
pub const OBQ_MAX_COLS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    None,
    Relu,
}

impl Activation {
    fn apply(self, m: DenseMatrix) -> DenseMatrix {
        match self {
            Activation::None => m,
            Activation::Relu => m.map(|v| v.max(0.0)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub weights: String,
    pub rows: usize,
    pub cols: usize,
    #[serde(default)]
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub name: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<String>,
    pub layers: Vec<LayerSpec>,
}

impl ModelManifest {
    pub fn validate_chain(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(QuantError::Manifest("no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.rows == 0 || l.cols == 0 {
                return Err(QuantError::Manifest(format!(
                    "layer {i} has an empty shape"
                )));
            }
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].rows != pair[1].cols {
                return Err(QuantError::Manifest(format!(
                    "layer {i} outputs {} values but layer {} expects {}",
                    pair[0].rows,
                    i + 1,
                    pair[1].cols
                )));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| QuantError::Manifest(e.to_string()))?;
        m.validate_chain()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: DenseMatrix,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub name: String,
    pub seed: u64,
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModelLayer {
    pub layer: QuantizedLayer,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub layers: Vec<QuantizedModelLayer>,
}

/// Anything that can run the chain forward.
pub trait Forward {
    fn input_dim(&self) -> usize;
    fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix>;
}

fn run_chain(
    layers: impl Iterator<Item = (DenseMatrix, Activation)>,
    x: &DenseMatrix,
) -> Result<DenseMatrix> {
    let mut h = x.clone();
    for (i, (w, act)) in layers.enumerate() {
        if w.cols() != h.rows() {
            return Err(QuantError::DimensionMismatch(format!(
                "layer {i} expects {} inputs, got {}",
                w.cols(),
                h.rows()
            )));
        }
        h = act.apply(matmul_blocked(&w, &h)?);
    }
    Ok(h)
}

impl Model {
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<(Self, ModelManifest)> {
        let path = manifest_path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| QuantError::io(path, e))?;
        let manifest = ModelManifest::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut layers = Vec::with_capacity(manifest.layers.len());
        for (i, spec) in manifest.layers.iter().enumerate() {
            let w = read_matrix(base.join(&spec.weights)).map_err(|e| e.in_layer(i, "load"))?;
            if w.shape() != (spec.rows, spec.cols) {
                return Err(QuantError::Manifest(format!(
                    "layer {i}: {} is {}x{}, manifest says {}x{}",
                    spec.weights,
                    w.rows(),
                    w.cols(),
                    spec.rows,
                    spec.cols
                )));
            }
            layers.push(Layer {
                weights: w,
                activation: spec.activation,
            });
        }
        Ok((
            Self {
                name: manifest.name.clone(),
                seed: manifest.seed,
                layers,
            },
            manifest,
        ))
    }

    /// Reads the calibration matrix a manifest points at.
    pub fn load_calibration(
        manifest_path: impl AsRef<Path>,
        manifest: &ModelManifest,
    ) -> Result<DenseMatrix> {
        let rel = manifest
            .calibration
            .as_ref()
            .ok_or_else(|| QuantError::Manifest("manifest has no calibration entry".into()))?;
        let base = manifest_path.as_ref().parent().unwrap_or(Path::new("."));
        read_matrix(base.join(rel))
    }

    /// Evaluation batch from the model seed, on a stream disjoint from the
    /// calibration stream.
    pub fn evaluation_batch(&self, cols: usize) -> DenseMatrix {
        SeededRng::with_stream(self.seed, streams::EVALUATION).normal_matrix(
            self.input_dim(),
            cols,
            1.0,
            Precision::F64,
        )
    }
}

impl Forward for Model {
    fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weights.cols())
    }

    fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        run_chain(
            self.layers
                .iter()
                .map(|l| (l.weights.clone(), l.activation)),
            x,
        )
    }
}

impl Forward for QuantizedModel {
    fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.layer.cols())
    }

    fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        run_chain(
            self.layers
                .iter()
                .map(|l| (dequantize_layer(&l.layer), l.activation)),
            x,
        )
    }
}

pub fn forward(model: &impl Forward, x: &DenseMatrix) -> Result<DenseMatrix> {
    if x.rows() != model.input_dim() {
        return Err(QuantError::DimensionMismatch(format!(
            "input has {} rows, model expects {}",
            x.rows(),
            model.input_dim()
        )));
    }
    model.forward(x)
}

/// A seeded MLP with He-scaled Gaussian weights; ReLU on every layer but the
/// last.
pub fn generate_mlp(layers: usize, dims: usize, seed: u64, precision: Precision) -> Model {
    let mut rng = SeededRng::with_stream(seed, streams::WEIGHTS);
    let std = (2.0 / dims as f64).sqrt();
    let layers = (0..layers)
        .map(|i| Layer {
            weights: rng.normal_matrix(dims, dims, std, precision),
            activation: if i + 1 < layers {
                Activation::Relu
            } else {
                Activation::None
            },
        })
        .collect();
    Model {
        name: format!("mlp-{dims}"),
        seed,
        layers,
    }
}

pub fn generate_calibration(
    dims: usize,
    cols: usize,
    seed: u64,
    precision: Precision,
) -> DenseMatrix {
    SeededRng::with_stream(seed, streams::CALIBRATION).normal_matrix(dims, cols, 1.0, precision)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Gptq,
    Rtn,
    Obq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizeOptions {
    pub config: GptqConfig,
    pub method: Method,
    pub propagate: bool,
    pub eval_cols: usize,
}

impl QuantizeOptions {
    pub fn new(config: GptqConfig) -> Self {
        Self {
            config,
            method: Method::Gptq,
            propagate: true,
            eval_cols: DEFAULT_EVAL_COLS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerReport {
    pub index: usize,
    pub rows: usize,
    pub cols: usize,
    /// Absent in evaluation reports, which cannot tell how a pack was produced.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<Method>,
    #[serde(flatten)]
    pub report: QuantizeReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelReport {
    pub propagate: Option<bool>,
    pub layers: Vec<LayerReport>,
    pub end_to_end_error: f64,
}

impl ModelReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Quantizes one layer with the selected method on calibration inputs `x`.
pub fn quantize_layer(
    w: &DenseMatrix,
    x: &DenseMatrix,
    method: Method,
    cfg: &GptqConfig,
) -> Result<(QuantizedLayer, QuantizeReport)> {
    match method {
        Method::Gptq => gptq_quantize_with_calibration(w, x, cfg),
        Method::Rtn => {
            cfg.validate()?;
            let q = rtn_quantize(w, cfg.bits, cfg.group_size)?;
            let err = layer_error(w, &q, x)?;
            let report = QuantizeReport {
                true_layer_error: Some(err),
                rtn_error: Some(err),
                ..QuantizeReport::default()
            };
            Ok((q, report))
        }
        Method::Obq => {
            cfg.validate()?;
            if w.cols() > OBQ_MAX_COLS {
                return Err(QuantError::InvalidConfig(format!(
                    "obq is limited to {OBQ_MAX_COLS} input columns, layer has {}",
                    w.cols()
                )));
            }
            let mut acc = HessianAccumulator::new(w.cols());
            acc.accumulate_chunked(x, crate::gptq::CALIBRATION_CHUNK)?;
            let hinv = invert_spd(&acc.dampen(cfg.damp_fraction))?;
            let grids = GroupGrids::fit(w, cfg.bits, cfg.group_size)?;
            let (q, _) = obq_quantize(w, &hinv, &grids)?;
            let rtn = rtn_quantize(w, cfg.bits, cfg.group_size)?;
            let report = QuantizeReport {
                true_layer_error: Some(layer_error(w, &q, x)?),
                rtn_error: Some(layer_error(w, &rtn, x)?),
                ..QuantizeReport::default()
            };
            Ok((q, report))
        }
    }
}

/// Quantizes every layer in order. With `propagate`, layer `k` is calibrated
/// on the outputs of the already-quantized layers `0..k`; otherwise on the
/// full-precision activations.
pub fn quantize_model(
    model: &Model,
    calibration: &DenseMatrix,
    opts: &QuantizeOptions,
) -> Result<(QuantizedModel, ModelReport)> {
    if calibration.rows() != model.input_dim() {
        return Err(QuantError::DimensionMismatch(format!(
            "calibration has {} rows, model expects {}",
            calibration.rows(),
            model.input_dim()
        )));
    }
    opts.config.validate()?;
    let results: Vec<(QuantizedLayer, QuantizeReport)> = if opts.propagate {
        let mut out = Vec::with_capacity(model.layers.len());
        let mut inputs = calibration.with_precision(Precision::F64);
        for (i, l) in model.layers.iter().enumerate() {
            let (q, report) = quantize_layer(&l.weights, &inputs, opts.method, &opts.config)
                .map_err(|e| e.in_layer(i, "quantize"))?;
            inputs = l
                .activation
                .apply(matmul_blocked(&dequantize_layer(&q), &inputs)?);
            out.push((q, report));
        }
        out
    } else {
        let mut inputs = Vec::with_capacity(model.layers.len());
        let mut h = calibration.with_precision(Precision::F64);
        for l in &model.layers {
            let next = l.activation.apply(matmul_blocked(&l.weights, &h)?);
            inputs.push(std::mem::replace(&mut h, next));
        }
        model
            .layers
            .par_iter()
            .zip(inputs.par_iter())
            .enumerate()
            .map(|(i, (l, x))| {
                quantize_layer(&l.weights, x, opts.method, &opts.config)
                    .map_err(|e| e.in_layer(i, "quantize"))
            })
            .collect::<Result<Vec<_>>>()?
    };

    let quantized = QuantizedModel {
        layers: results
            .iter()
            .zip(&model.layers)
            .map(|((q, _), l)| QuantizedModelLayer {
                layer: q.clone(),
                activation: l.activation,
            })
            .collect(),
    };
    let eval_x = model.evaluation_batch(opts.eval_cols.max(1));
    let end_to_end_error = end_to_end_error(model, &quantized, &eval_x)?;
    let report = ModelReport {
        propagate: Some(opts.propagate),
        layers: results
            .into_iter()
            .zip(&model.layers)
            .enumerate()
            .map(|(index, ((_, report), l))| LayerReport {
                index,
                rows: l.weights.rows(),
                cols: l.weights.cols(),
                method: Some(opts.method),
                report,
            })
            .collect(),
        end_to_end_error,
    };
    Ok((quantized, report))
}

pub fn end_to_end_error(model: &Model, quantized: &QuantizedModel, x: &DenseMatrix) -> Result<f64> {
    let x = x.with_precision(Precision::F64);
    frobenius_sq_diff(&forward(model, &x)?, &forward(quantized, &x)?)
}

/// Per-layer `||W·X_k − Ŵ·X_k||²` on the full-precision activations `X_k`
/// produced from `eval_x`, plus the end-to-end output error.
pub fn evaluate(
    model: &Model,
    quantized: &QuantizedModel,
    eval_x: &DenseMatrix,
) -> Result<ModelReport> {
    if quantized.layers.len() != model.layers.len() {
        return Err(QuantError::DimensionMismatch(format!(
            "model has {} layers, quantized model has {}",
            model.layers.len(),
            quantized.layers.len()
        )));
    }
    let mut h = eval_x.with_precision(Precision::F64);
    if h.rows() != model.input_dim() {
        return Err(QuantError::DimensionMismatch(format!(
            "evaluation input has {} rows, model expects {}",
            h.rows(),
            model.input_dim()
        )));
    }
    let mut layers = Vec::with_capacity(model.layers.len());
    for (index, (l, q)) in model.layers.iter().zip(&quantized.layers).enumerate() {
        if (q.layer.rows(), q.layer.cols()) != l.weights.shape() {
            return Err(QuantError::DimensionMismatch(format!(
                "layer {index}: quantized shape differs from the model"
            )));
        }
        let exact = matmul_blocked(&l.weights, &h)?;
        let approx = matmul_blocked(&dequantize_layer(&q.layer), &h)?;
        let err = frobenius_sq_diff(&exact, &approx)?;
        layers.push(LayerReport {
            index,
            rows: l.weights.rows(),
            cols: l.weights.cols(),
            method: None,
            report: QuantizeReport {
                true_layer_error: Some(err),
                ..QuantizeReport::default()
            },
        });
        h = l.activation.apply(exact);
    }
    Ok(ModelReport {
        propagate: None,
        layers,
        end_to_end_error: end_to_end_error(model, quantized, eval_x)?,
    })
}

pub fn layer_file_name(index: usize) -> String {
    format!("layer_{index:03}.gpq")
}

/// Writes one GPTQPACK file per layer into `dir`.
pub fn save_quantized(dir: impl AsRef<Path>, quantized: &QuantizedModel) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| QuantError::io(dir, e))?;
    let mut paths = Vec::with_capacity(quantized.layers.len());
    for (i, l) in quantized.layers.iter().enumerate() {
        let path = dir.join(layer_file_name(i));
        pack(&l.layer)
            .and_then(|p| p.write(&path))
            .map_err(|e| e.in_layer(i, "pack"))?;
        paths.push(path);
    }
    Ok(paths)
}

/// Reads the packed layers of `model` from `dir`.
pub fn load_quantized(dir: impl AsRef<Path>, model: &Model) -> Result<QuantizedModel> {
    let dir = dir.as_ref();
    let mut layers = Vec::with_capacity(model.layers.len());
    for (i, l) in model.layers.iter().enumerate() {
        let q = PackedWeights::read(dir.join(layer_file_name(i)))
            .and_then(|p| p.to_layer())
            .map_err(|e| e.in_layer(i, "unpack"))?;
        if (q.rows(), q.cols()) != l.weights.shape() {
            return Err(QuantError::DimensionMismatch(format!(
                "layer {i}: packed shape {}x{} differs from the model",
                q.rows(),
                q.cols()
            ))
            .in_layer(i, "unpack"));
        }
        layers.push(QuantizedModelLayer {
            layer: q,
            activation: l.activation,
        });
    }
    Ok(QuantizedModel { layers })
}
