//! The operations behind the `quantkit` binary, callable from Rust.
//!
//! Every artifact written here is a pure function of the arguments and the
//! input files. Only the benchmark report carries wall-clock numbers.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{QuantError, Result};
use crate::gptq::{GptqConfig, GroupGridPolicy};
use crate::packfmt::{matvec_bench, BenchReport, PackedWeights};
use crate::pipeline::{
    evaluate, generate_calibration, generate_mlp, load_quantized, quantize_model, save_quantized,
    LayerSpec, Method, Model, ModelManifest, ModelReport, QuantizeOptions, MANIFEST_FILE,
    OBQ_MAX_COLS, REPORT_FILE,
};
use crate::tensor::{write_matrix, Precision};

#[derive(Debug, Clone)]
pub struct GenArgs {
    pub layers: usize,
    pub dims: usize,
    pub calib_cols: usize,
    pub seed: u64,
    pub precision: Precision,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone)]
pub struct QuantizeArgs {
    pub manifest: PathBuf,
    pub bits: u32,
    pub group: usize,
    pub block: usize,
    pub damp: f64,
    pub method: Method,
    pub propagate: bool,
    pub precision: Precision,
    pub group_policy: GroupGridPolicy,
    pub eval_cols: usize,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub manifest: PathBuf,
    pub quantized_dir: PathBuf,
    pub eval_cols: usize,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| QuantError::io(dir, e))
}

/// Writes a seeded MLP fixture and returns the manifest path.
pub fn gen(args: &GenArgs) -> Result<PathBuf> {
    if args.layers == 0 {
        return Err(QuantError::InvalidConfig(
            "--layers must be at least 1".into(),
        ));
    }
    if args.dims == 0 {
        return Err(QuantError::InvalidConfig(
            "--dims must be at least 1".into(),
        ));
    }
    if args.calib_cols == 0 {
        return Err(QuantError::InvalidConfig(
            "--calib-cols must be at least 1".into(),
        ));
    }
    create_dir(&args.out_dir)?;
    let model = generate_mlp(args.layers, args.dims, args.seed, args.precision);
    let mut layers = Vec::with_capacity(args.layers);
    for (i, l) in model.layers.iter().enumerate() {
        let file = format!("layer_{i:03}.gmat");
        write_matrix(args.out_dir.join(&file), &l.weights)?;
        layers.push(LayerSpec {
            weights: file,
            rows: l.weights.rows(),
            cols: l.weights.cols(),
            activation: l.activation,
        });
    }
    let calibration = "calibration.gmat".to_string();
    write_matrix(
        args.out_dir.join(&calibration),
        &generate_calibration(args.dims, args.calib_cols, args.seed, args.precision),
    )?;
    let manifest = ModelManifest {
        name: model.name,
        seed: args.seed,
        calibration: Some(calibration),
        layers,
    };
    let path = args.out_dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_toml()).map_err(|e| QuantError::io(&path, e))?;
    Ok(path)
}

/// Quantizes every layer of a manifest, writing one GPTQPACK file per layer
/// and `report.json` into the output directory.
pub fn quantize(args: &QuantizeArgs) -> Result<ModelReport> {
    let config = GptqConfig::new(args.bits)
        .group_size(args.group)
        .block_size(args.block)
        .damp_fraction(args.damp)
        .precision(args.precision)
        .group_policy(args.group_policy);
    config.validate()?;
    let (model, manifest) = Model::load(&args.manifest)?;
    if args.method == Method::Obq {
        if let Some((i, l)) = model
            .layers
            .iter()
            .enumerate()
            .find(|(_, l)| l.weights.cols() > OBQ_MAX_COLS)
        {
            return Err(QuantError::InvalidConfig(format!(
                "obq is limited to {OBQ_MAX_COLS} input columns, layer {i} has {}",
                l.weights.cols()
            )));
        }
    }
    let calibration = Model::load_calibration(&args.manifest, &manifest)?;
    let opts = QuantizeOptions {
        config,
        method: args.method,
        propagate: args.propagate,
        eval_cols: args.eval_cols,
    };
    let (quantized, report) = quantize_model(&model, &calibration, &opts)?;
    save_quantized(&args.out_dir, &quantized)?;
    let path = args.out_dir.join(REPORT_FILE);
    fs::write(&path, report.to_json()).map_err(|e| QuantError::io(&path, e))?;
    Ok(report)
}

pub fn eval(args: &EvalArgs) -> Result<ModelReport> {
    if args.eval_cols == 0 {
        return Err(QuantError::InvalidConfig(
            "--eval-cols must be at least 1".into(),
        ));
    }
    let (model, _) = Model::load(&args.manifest)?;
    let quantized = load_quantized(&args.quantized_dir, &model)?;
    evaluate(&model, &quantized, &model.evaluation_batch(args.eval_cols))
}

pub fn bench(pack_file: &Path, trials: usize) -> Result<BenchReport> {
    if trials == 0 {
        return Err(QuantError::InvalidConfig(
            "--trials must be at least 1".into(),
        ));
    }
    matvec_bench(&PackedWeights::read(pack_file)?, trials)
}

/// Bench report as `key = value` lines; timing lines are grouped last.
pub fn format_bench(r: &BenchReport) -> String {
    let mut out = String::new();
    let mut line = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
    line("rows", r.rows.to_string());
    line("cols", r.cols.to_string());
    line("bits", r.bits.to_string());
    line("code_bytes", r.code_bytes.to_string());
    line("metadata_bytes", r.metadata_bytes.to_string());
    line("fp16_weight_bytes", r.fp16_bytes.to_string());
    line("fp32_weight_bytes", r.fp32_bytes.to_string());
    line(
        "weight_bytes_ratio_fp16",
        format!("{:.4}", r.analytic_ratio),
    );
    line(
        "weight_bytes_ratio_fp16_with_metadata",
        format!("{:.4}", r.ratio_with_metadata),
    );
    line("qmatvec_bytes_touched", r.qmatvec_bytes_touched.to_string());
    line("dense_bytes_touched", r.dense_bytes_touched.to_string());
    line("trials", r.trials.to_string());
    line(
        "timing.qmatvec_seconds",
        format!("{:.6e}", r.qmatvec_time.as_secs_f64()),
    );
    line(
        "timing.dense_f32_seconds",
        format!("{:.6e}", r.dense_time.as_secs_f64()),
    );
    line("timing.qmatvec_gbps", format!("{:.3}", r.qmatvec_gbps));
    line("timing.dense_f32_gbps", format!("{:.3}", r.dense_gbps));
    line("timing.speedup", format!("{:.3}", r.speedup()));
    out
}
