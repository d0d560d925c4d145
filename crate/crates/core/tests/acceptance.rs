//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion does.

mod common;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use common::{
    dampened_hessian, geometric_mean, layer_instance, mean, orthogonal_calibration, unbatched_gptq,
};
use quantkit::gptq::{gptq_quantize, gptq_quantize_with_calibration, GptqConfig};
use quantkit::grid::{dequantize_layer, rtn_quantize, GroupGrids, QuantGrid};
use quantkit::hessian::{cholesky_upper, ge_downdate, invert_spd};
use quantkit::obq::{exhaustive_optimal, obq_quantize_row, quadratic_row_error, RowGrids};
use quantkit::packfmt::{pack, qmatvec, unpack, PackedWeights};
use quantkit::pipeline::{
    generate_calibration, generate_mlp, quantize_layer, quantize_model, Method, QuantizeOptions,
};
use quantkit::rng::SeededRng;
use quantkit::{DenseMatrix, Precision};

/// Geometric-mean GPTQ/OBQ error ratio measured on the first run of the
/// 50-seed 64×64 3-bit suite.
const FROZEN_GPTQ_OBQ_RATIO: f64 = 1.133645276;
const GPTQ_OBQ_RATIO_LIMIT: f64 = 1.5;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn f64_cfg(bits: u32) -> GptqConfig {
    GptqConfig::new(bits).precision(Precision::F64)
}

fn factor_for(x: &DenseMatrix) -> quantkit::CholeskyFactor {
    cholesky_upper(&invert_spd(&dampened_hessian(x, 0.01)).unwrap()).unwrap()
}

fn block_size_invariance() -> Outcome {
    let start = Instant::now();
    let mut mismatches = 0;
    for seed in 0..10 {
        let (w, x) = layer_instance(seed, 64, 64, 128);
        let chol = factor_for(&x);
        let (reference, _) = gptq_quantize(&w, &chol, &f64_cfg(4).block_size(1)).unwrap();
        for b in [8, 37, 64] {
            let (q, _) = gptq_quantize(&w, &chol, &f64_cfg(4).block_size(b)).unwrap();
            if q.codes() != reference.codes() {
                mismatches += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches == 0 && elapsed < Duration::from_secs(10),
        format!(
            "{mismatches} mismatching code matrices, {:.3} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn diagonal_hessian_is_rtn() -> Outcome {
    let mut mismatches = 0;
    let mut runs = 0;
    for seed in 0..10 {
        let (w, _) = layer_instance(seed, 32, 32, 0);
        let x = orthogonal_calibration(seed, 32, 96);
        for bits in [2, 3, 4] {
            for group in [0, 8] {
                let cfg = GptqConfig::new(bits).group_size(group);
                let (q, _) = gptq_quantize_with_calibration(&w, &x, &cfg).unwrap();
                let rtn = rtn_quantize(&w, bits, group).unwrap();
                runs += 1;
                if q.codes() != rtn.codes() || q.grids() != rtn.grids() {
                    mismatches += 1;
                }
            }
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches} of {runs} runs differ from RTN"),
    )
}

fn cholesky_downdate_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = SeededRng::new(1000 + seed);
        let n = 2 + rng.below(63);
        let x = rng.normal_matrix(n, 2 * n, 1.0, Precision::F64);
        let a = invert_spd(&dampened_hessian(&x, 0.01)).unwrap();
        let t = cholesky_upper(&a).unwrap();
        let mut m = a;
        for k in 0..n {
            let pivot = m.get(0, 0).sqrt();
            let row_max = (k..n).map(|c| t.get(k, c).abs()).fold(0.0, f64::max);
            for c in k..n {
                let rel = (m.get(0, c - k) / pivot - t.get(k, c)).abs() / row_max;
                worst = worst.max(rel);
            }
            if k + 1 < n {
                m = ge_downdate(&m, 0).unwrap();
            }
        }
    }
    outcome(
        worst <= 1e-8,
        format!("max relative row deviation {worst:.3e}"),
    )
}

fn unbatched_oracle_parity() -> Outcome {
    let mut code_mismatches = 0;
    let mut worst_weight = 0.0f64;
    for seed in 0..10 {
        let (w, x) = layer_instance(200 + seed, 16, 16, 64);
        let h = dampened_hessian(&x, 0.01);
        let (oracle, _) = unbatched_gptq(&w, &h, 3);
        for b in [1, 2, 5, 16] {
            let (q, _) = gptq_quantize_with_calibration(&w, &x, &f64_cfg(3).block_size(b)).unwrap();
            if q.codes() != oracle.codes() || q.grids() != oracle.grids() {
                code_mismatches += 1;
            }
        }
        let (q, _) = gptq_quantize_with_calibration(&w, &x, &f64_cfg(3)).unwrap();
        let diff =
            quantkit::tensor::frobenius_sq_diff(&dequantize_layer(&q), &dequantize_layer(&oracle))
                .unwrap();
        worst_weight = worst_weight.max(diff);
    }
    outcome(
        code_mismatches == 0 && worst_weight == 0.0,
        format!("{code_mismatches} code mismatches, dequantized difference {worst_weight:.1e}"),
    )
}

fn hessian_scale_invariance() -> Outcome {
    let mut mismatches = 0;
    for seed in 0..10 {
        let (w, x) = layer_instance(300 + seed, 32, 32, 128);
        let (reference, _) = gptq_quantize_with_calibration(&w, &x, &f64_cfg(4)).unwrap();
        for c in [0.001, 1000.0] {
            let (q, _) = gptq_quantize_with_calibration(&w, &x.scale(c), &f64_cfg(4)).unwrap();
            if q.codes() != reference.codes() {
                mismatches += 1;
            }
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches} of 20 scaled runs changed codes"),
    )
}

#[derive(serde::Serialize, serde::Deserialize, PartialEq, Debug)]
struct ErrorBaseline {
    seeds: Vec<u64>,
    gptq: Vec<f64>,
    rtn: Vec<f64>,
}

fn baseline_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/error_ordering_32x32_b4.json")
}

fn error_ordering() -> Outcome {
    let seeds: Vec<u64> = (0..100).collect();
    let mut gptq = Vec::new();
    let mut rtn = Vec::new();
    for &seed in &seeds {
        let (w, x) = layer_instance(seed, 32, 32, 128);
        let (_, report) = gptq_quantize_with_calibration(&w, &x, &GptqConfig::new(4)).unwrap();
        gptq.push(report.true_layer_error.unwrap());
        rtn.push(report.rtn_error.unwrap());
    }
    let wins = gptq.iter().zip(&rtn).filter(|(g, r)| g < r).count();
    let measured = ErrorBaseline { seeds, gptq, rtn };

    let path = baseline_path();
    if std::env::var_os("QUANTKIT_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string_pretty(&measured).unwrap()).unwrap();
    }
    let matches_baseline = match std::fs::read_to_string(&path) {
        Ok(text) => {
            let frozen: ErrorBaseline = serde_json::from_str(&text).unwrap();
            frozen.seeds == measured.seeds
                && close_all(&frozen.gptq, &measured.gptq)
                && close_all(&frozen.rtn, &measured.rtn)
        }
        Err(_) => false,
    };
    let (mg, mr) = (mean(&measured.gptq), mean(&measured.rtn));
    outcome(
        wins >= 95 && mg < mr && matches_baseline,
        format!("GPTQ better on {wins}/100, mean {mg:.4} vs RTN {mr:.4}, baseline match {matches_baseline}"),
    )
}

fn close_all(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= 1e-9 * x.abs().max(y.abs()))
}

fn gptq_vs_obq() -> Outcome {
    let mut ratios = Vec::new();
    for seed in 0..50 {
        let (w, x) = layer_instance(seed, 64, 64, 128);
        let cfg = GptqConfig::new(3);
        let (_, g) = quantize_layer(&w, &x, Method::Gptq, &cfg).unwrap();
        let (_, o) = quantize_layer(&w, &x, Method::Obq, &cfg).unwrap();
        ratios.push(g.true_layer_error.unwrap() / o.true_layer_error.unwrap());
    }
    let ratio = geometric_mean(&ratios);
    let frozen_ok = (ratio - FROZEN_GPTQ_OBQ_RATIO).abs() <= 1e-6 * ratio;
    outcome(
        ratio <= GPTQ_OBQ_RATIO_LIMIT && frozen_ok,
        format!("geometric-mean ratio {ratio:.9} (frozen {FROZEN_GPTQ_OBQ_RATIO:.9}, limit {GPTQ_OBQ_RATIO_LIMIT})"),
    )
}

fn oracle_chain() -> Outcome {
    let mut violations = 0;
    let mut instances = 0;
    let tol = |v: f64| 1e-12 * v.abs().max(1.0);
    for seed in 0..200u64 {
        let mut rng = SeededRng::new(4000 + seed);
        let n = 1 + rng.below(4);
        let bits = if seed % 2 == 0 { 2 } else { 3 };
        let w = rng.normal_vec(n, 1.0);
        let x = rng.normal_matrix(n, 3 * n, 1.0, Precision::F64);
        let h = dampened_hessian(&x, 0.01);
        let hinv = invert_spd(&h).unwrap();
        let grid = quantkit::grid::fit_grid(&w, bits).unwrap();
        let grids = RowGrids::single(&grid);

        let (_, best) = exhaustive_optimal(&w, &h, grids).unwrap();
        let (obq_codes, _) = obq_quantize_row(&w, &hinv, grids).unwrap();
        let obq = quadratic_row_error(&w, &obq_codes, &h, grids);
        let wm = DenseMatrix::from_vec(1, n, w.clone(), Precision::F64).unwrap();
        let (gq, _) = gptq_quantize(&wm, &cholesky_upper(&hinv).unwrap(), &f64_cfg(bits)).unwrap();
        let gptq = quadratic_row_error(&w, gq.codes(), &h, grids);
        instances += 1;
        if best > obq + tol(obq) || best > gptq + tol(gptq) {
            violations += 1;
        }
    }
    // Weights exactly on a power-of-two grid that spans both end codes.
    let mut on_grid_nonzero = 0;
    for seed in 0..50u64 {
        let mut rng = SeededRng::new(5000 + seed);
        let n = 2 + rng.below(3);
        let bits = 2;
        let grid = QuantGrid::new(bits, 0.25, 1).unwrap();
        let mut codes: Vec<u8> = (0..n).map(|_| rng.below(4) as u8).collect();
        codes[0] = 0;
        codes[1] = 3;
        let w: Vec<f64> = codes.iter().map(|&c| grid.dequantize(c)).collect();
        let x = rng.normal_matrix(n, 3 * n, 1.0, Precision::F64);
        let h = dampened_hessian(&x, 0.01);
        let hinv = invert_spd(&h).unwrap();
        let grids = RowGrids::single(&grid);
        let (ex_codes, best) = exhaustive_optimal(&w, &h, grids).unwrap();
        let (obq_codes, _) = obq_quantize_row(&w, &hinv, grids).unwrap();
        let obq = quadratic_row_error(&w, &obq_codes, &h, grids);
        let wm = DenseMatrix::from_vec(1, n, w.clone(), Precision::F64).unwrap();
        let (gq, _) = gptq_quantize(&wm, &cholesky_upper(&hinv).unwrap(), &f64_cfg(bits)).unwrap();
        let gptq = quadratic_row_error(&w, gq.codes(), &h, grids);
        instances += 1;
        if best != 0.0
            || obq != 0.0
            || gptq != 0.0
            || ex_codes != codes
            || gq.codes() != codes.as_slice()
        {
            on_grid_nonzero += 1;
        }
    }
    outcome(
        violations == 0 && on_grid_nonzero == 0,
        format!("{instances} instances, {violations} ordering violations, {on_grid_nonzero} nonzero on-grid errors"),
    )
}

fn random_layer(
    rng: &mut SeededRng,
    rows: usize,
    cols: usize,
    bits: u32,
    group: usize,
) -> quantkit::QuantizedLayer {
    let w = rng.normal_matrix(rows, cols, 1.0, Precision::F32);
    rtn_quantize(&w, bits, group).unwrap()
}

fn pack_roundtrip() -> Outcome {
    let mut failures = 0;
    let mut rng = SeededRng::new(6000);
    for case in 0..1000usize {
        let bits = [2, 3, 4, 8][case % 4];
        let cols = 1 + case % 65;
        let group = [0, 32, cols - 1][(case / 4) % 3];
        let rows = 1 + rng.below(6);
        let q = random_layer(&mut rng, rows, cols, bits, group);
        let bytes = pack(&q).unwrap().to_bytes();
        let back = unpack(&bytes).unwrap();
        if back != q || pack(&back).unwrap().to_bytes() != bytes {
            failures += 1;
        }
    }
    let grid = QuantGrid::new(3, 1.0, 0).unwrap();
    let grids = GroupGrids::new(1, 8, 0, vec![grid]).unwrap();
    let row = quantkit::QuantizedLayer::new(vec![1, 2, 3, 4, 5, 6, 7, 0], grids, 3).unwrap();
    let payload = pack(&row).unwrap().payload().to_vec();
    outcome(
        failures == 0 && payload == [0xD1, 0x58, 0x1F],
        format!("{failures} of 1000 roundtrips failed, example row packs to {payload:02X?}"),
    )
}

fn qmatvec_parity() -> Outcome {
    let mut failures = 0;
    let mut worst = 0.0f64;
    let mut rng = SeededRng::new(7000);
    for case in 0..1000usize {
        let bits = [2, 3, 4, 8][case % 4];
        let rows = 1 + rng.below(24);
        let cols = 1 + rng.below(150);
        let group = [0, 16, 32][(case / 4) % 3];
        let q = random_layer(&mut rng, rows, cols, bits, group);
        let x: Vec<f32> = rng
            .normal_vec(cols, 1.0)
            .into_iter()
            .map(|v| v as f32)
            .collect();
        let y = qmatvec(&pack(&q).unwrap(), &x).unwrap();
        let w_hat = dequantize_layer(&q);
        for (r, &yr) in y.iter().enumerate() {
            let row = w_hat.row(r);
            let exact: f64 = row.iter().zip(&x).map(|(w, &v)| w * v as f64).sum();
            let magnitude: f64 = row.iter().zip(&x).map(|(w, &v)| (w * v as f64).abs()).sum();
            let rel = (yr as f64 - exact).abs() / magnitude.max(f64::MIN_POSITIVE);
            worst = worst.max(rel);
            if rel > 1e-5 {
                failures += 1;
            }
        }
    }
    let ratios: Vec<String> = [2u32, 3, 4, 8]
        .iter()
        .map(|&bits| {
            let p = pack(&random_layer(&mut rng, 64, 256, bits, 0)).unwrap();
            format!("{bits}-bit {:.4}", ratio_before_metadata(&p))
        })
        .collect();
    let ratios_ok = [2u32, 3, 4, 8].iter().all(|&bits| {
        let p = pack(&random_layer(&mut rng, 8, 64, bits, 0)).unwrap();
        (ratio_before_metadata(&p) - 16.0 / bits as f64).abs() < 1e-12
    });
    outcome(
        failures == 0 && ratios_ok,
        format!(
            "{failures} outputs outside 1e-5 (worst {worst:.2e}); weight-byte ratio vs fp16: {}",
            ratios.join(", ")
        ),
    )
}

fn ratio_before_metadata(p: &PackedWeights) -> f64 {
    (2 * p.rows() * p.cols()) as f64 / p.payload().len() as f64
}

fn propagation_benefit() -> Outcome {
    let mut on = Vec::new();
    let mut off = Vec::new();
    for seed in 0..20 {
        let model = generate_mlp(4, 64, seed, Precision::F32);
        let calibration = generate_calibration(64, 128, seed, Precision::F32);
        let mut opts = QuantizeOptions::new(GptqConfig::new(3));
        let (_, with) = quantize_model(&model, &calibration, &opts).unwrap();
        opts.propagate = false;
        let (_, without) = quantize_model(&model, &calibration, &opts).unwrap();
        on.push(with.end_to_end_error);
        off.push(without.end_to_end_error);
    }
    let (m_on, m_off) = (mean(&on), mean(&off));
    let better = on.iter().zip(&off).filter(|(a, b)| a <= b).count();
    outcome(
        m_on <= m_off,
        format!("mean end-to-end error {m_on:.5} propagated vs {m_off:.5} not ({better}/20 seeds no worse)"),
    )
}

fn time_gptq(d: usize) -> Duration {
    let (w, x) = layer_instance(9000 + d as u64, d, d, 128);
    let start = Instant::now();
    gptq_quantize_with_calibration(&w, &x, &GptqConfig::new(4).block_size(128)).unwrap();
    start.elapsed()
}

fn time_obq(d: usize) -> Duration {
    let (w, x) = layer_instance(9100 + d as u64, d, d, 128);
    let start = Instant::now();
    quantize_layer(&w, &x, Method::Obq, &GptqConfig::new(4)).unwrap();
    start.elapsed()
}

fn scaling() -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    pool.install(|| {
        time_gptq(256);
        let g256 = time_gptq(256).as_secs_f64();
        let g1024 = time_gptq(1024).as_secs_f64();
        let o128 = time_obq(128).as_secs_f64();
        let o256 = time_obq(256).as_secs_f64();
        let gptq_exp = (g1024 / g256).ln() / 4f64.ln();
        let obq_exp = (o256 / o128).ln() / 2f64.ln();
        outcome(
            g1024 < 10.0 && gptq_exp <= 3.0 && obq_exp >= gptq_exp + 0.5,
            format!(
                "gptq 256: {g256:.3} s, 1024: {g1024:.3} s (exponent {gptq_exp:.2}); obq 128: {o128:.3} s, 256: {o256:.3} s (exponent {obq_exp:.2})"
            ),
        )
    })
}

fn grouping_trend() -> Outcome {
    let mut means = Vec::new();
    for group in [0, 64, 32] {
        let errors: Vec<f64> = (0..100)
            .map(|seed| {
                let (w, x) = layer_instance(seed, 32, 128, 256);
                let cfg = GptqConfig::new(2).group_size(group);
                gptq_quantize_with_calibration(&w, &x, &cfg)
                    .unwrap()
                    .1
                    .true_layer_error
                    .unwrap()
            })
            .collect();
        means.push(mean(&errors));
    }
    outcome(
        means[1] <= means[0] && means[2] <= means[1],
        format!(
            "mean error by group size 0/64/32: {:.3} / {:.3} / {:.3}",
            means[0], means[1], means[2]
        ),
    )
}

fn main() {
    let criteria: [Criterion; 13] = [
        ("block-size invariance", block_size_invariance),
        ("diagonal Hessian reduces to RTN", diagonal_hessian_is_rtn),
        (
            "Cholesky rows match sequential elimination",
            cholesky_downdate_equivalence,
        ),
        ("unbatched oracle parity", unbatched_oracle_parity),
        ("Hessian scale invariance", hessian_scale_invariance),
        ("GPTQ beats RTN", error_ordering),
        ("GPTQ close to OBQ", gptq_vs_obq),
        ("exhaustive <= OBQ, GPTQ", oracle_chain),
        ("pack roundtrip", pack_roundtrip),
        ("qmatvec parity", qmatvec_parity),
        ("propagation benefit", propagation_benefit),
        ("scaling", scaling),
        ("2-bit grouping trend", grouping_trend),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let result = run();
        println!(
            "criterion {:>2} {}: {} ({})",
            i + 1,
            if result.pass { "PASS" } else { "FAIL" },
            name,
            result.detail
        );
        if !result.pass {
            failed.push(i + 1);
        }
    }
    if !failed.is_empty() {
        eprintln!("failing criteria: {failed:?}");
        std::process::exit(1);
    }
}
