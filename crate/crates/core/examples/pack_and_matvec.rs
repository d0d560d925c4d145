//! Packs a quantized layer into a GPTQPACK file, reads it back and multiplies
//! it with a vector without expanding the weights.

use quantkit::packfmt::{pack, qmatvec, PackedWeights};
use quantkit::rng::SeededRng;
use quantkit::{dequantize_layer, gptq_quantize_with_calibration, GptqConfig, Precision};

fn main() -> quantkit::Result<()> {
    let mut rng = SeededRng::new(5);
    let w = rng.normal_matrix(96, 200, 1.0, Precision::F32);
    let x = rng.normal_matrix(200, 128, 1.0, Precision::F32);
    let (layer, _) = gptq_quantize_with_calibration(&w, &x, &GptqConfig::new(3).group_size(64))?;

    let path = std::env::temp_dir().join("quantkit_example.gpq");
    pack(&layer)?.write(&path)?;
    let packed = PackedWeights::read(&path)?;
    println!(
        "{}: {} bytes ({} metadata, {} codes)",
        path.display(),
        packed.encoded_len(),
        packed.metadata_bytes(),
        packed.payload().len()
    );
    assert_eq!(packed.to_layer()?, layer);

    let v: Vec<f32> = rng
        .normal_vec(200, 1.0)
        .into_iter()
        .map(|v| v as f32)
        .collect();
    let y = qmatvec(&packed, &v)?;
    let dense = dequantize_layer(&layer);
    let max_dev = (0..dense.rows())
        .map(|r| {
            let exact: f64 = dense
                .row(r)
                .iter()
                .zip(&v)
                .map(|(a, &b)| a * b as f64)
                .sum();
            (y[r] as f64 - exact).abs()
        })
        .fold(0.0, f64::max);
    println!("y[0..4] = {:?}", &y[..4]);
    println!("max deviation from dense product {max_dev:.2e}");
    std::fs::remove_file(&path).ok();
    Ok(())
}
