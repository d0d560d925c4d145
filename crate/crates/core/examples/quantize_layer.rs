//! Quantizes one random layer with GPTQ and round-to-nearest and compares
//! the output error on the calibration inputs.
//!
//! cargo run --release --example quantize_layer -- [bits] [group]

use quantkit::rng::{streams, SeededRng};
use quantkit::{gptq_quantize_with_calibration, GptqConfig, Precision};

fn main() -> quantkit::Result<()> {
    let mut args = std::env::args().skip(1);
    let bits: u32 = args.next().map_or(4, |a| a.parse().expect("bits"));
    let group: usize = args.next().map_or(0, |a| a.parse().expect("group size"));

    let w =
        SeededRng::with_stream(0, streams::WEIGHTS).normal_matrix(256, 256, 1.0, Precision::F32);
    let x = SeededRng::with_stream(0, streams::CALIBRATION).normal_matrix(
        256,
        128,
        1.0,
        Precision::F32,
    );
    let cfg = GptqConfig::new(bits).group_size(group);
    let (layer, report) = gptq_quantize_with_calibration(&w, &x, &cfg)?;

    let gptq = report.true_layer_error.unwrap();
    let rtn = report.rtn_error.unwrap();
    println!(
        "layer {}x{}, {bits} bits, group {group}",
        layer.rows(),
        layer.cols()
    );
    println!("gptq  ||WX - QX||^2 = {gptq:.4}");
    println!("rtn   ||WX - QX||^2 = {rtn:.4}");
    println!("ratio               = {:.4}", gptq / rtn);
    println!("dampening retries   = {}", report.damp_retries);
    println!("time                = {:.3?}", report.wall_time);
    Ok(())
}
