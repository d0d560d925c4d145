//! 2-bit quantization error as the group size shrinks.

use quantkit::rng::{streams, SeededRng};
use quantkit::{gptq_quantize_with_calibration, GptqConfig, Precision};

fn main() -> quantkit::Result<()> {
    let seeds = 20;
    println!("group  gptq        rtn         metadata bytes/row");
    for group in [0, 128, 64, 32, 16] {
        let (mut gptq, mut rtn) = (0.0, 0.0);
        for seed in 0..seeds {
            let w = SeededRng::with_stream(seed, streams::WEIGHTS).normal_matrix(
                32,
                128,
                1.0,
                Precision::F32,
            );
            let x = SeededRng::with_stream(seed, streams::CALIBRATION).normal_matrix(
                128,
                256,
                1.0,
                Precision::F32,
            );
            let (_, r) =
                gptq_quantize_with_calibration(&w, &x, &GptqConfig::new(2).group_size(group))?;
            gptq += r.true_layer_error.unwrap();
            rtn += r.rtn_error.unwrap();
        }
        let groups = quantkit::grid::groups_per_row(128, group);
        println!(
            "{group:>5}  {:<10.2}  {:<10.2}  {}",
            gptq / seeds as f64,
            rtn / seeds as f64,
            groups * 5
        );
    }
    Ok(())
}
