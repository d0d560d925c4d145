//! Quantizes a 4-layer MLP with and without feeding each layer the outputs of
//! the already-quantized layers before it.

use quantkit::pipeline::{generate_calibration, generate_mlp, quantize_model, QuantizeOptions};
use quantkit::{GptqConfig, Precision};

fn main() -> quantkit::Result<()> {
    let mut on = 0.0;
    let mut off = 0.0;
    let seeds = 10;
    for seed in 0..seeds {
        let model = generate_mlp(4, 64, seed, Precision::F32);
        let calibration = generate_calibration(64, 128, seed, Precision::F32);
        let mut opts = QuantizeOptions::new(GptqConfig::new(3));
        let (_, with) = quantize_model(&model, &calibration, &opts)?;
        opts.propagate = false;
        let (_, without) = quantize_model(&model, &calibration, &opts)?;
        println!(
            "seed {seed}: end-to-end {:.3} propagated, {:.3} not",
            with.end_to_end_error, without.end_to_end_error
        );
        on += with.end_to_end_error;
        off += without.end_to_end_error;
    }
    println!(
        "mean: {:.3} vs {:.3}",
        on / seeds as f64,
        off / seeds as f64
    );

    let model = generate_mlp(4, 64, 0, Precision::F32);
    let calibration = generate_calibration(64, 128, 0, Precision::F32);
    let (_, report) = quantize_model(
        &model,
        &calibration,
        &QuantizeOptions::new(GptqConfig::new(3)),
    )?;
    println!("{}", report.to_json());
    Ok(())
}
