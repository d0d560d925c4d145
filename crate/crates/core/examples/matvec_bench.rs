//! Times the packed matvec against a dense float32 matvec.
//!
//! cargo run --release --example matvec_bench -- [dim] [bits] [trials]

use quantkit::commands::format_bench;
use quantkit::packfmt::{matvec_bench, pack};
use quantkit::rng::SeededRng;
use quantkit::{rtn_quantize, Precision};

fn main() -> quantkit::Result<()> {
    let mut args = std::env::args().skip(1);
    let dim: usize = args.next().map_or(4096, |a| a.parse().expect("dim"));
    let bits: u32 = args.next().map_or(3, |a| a.parse().expect("bits"));
    let trials: usize = args.next().map_or(20, |a| a.parse().expect("trials"));

    let w = SeededRng::new(0).normal_matrix(dim, dim, 1.0, Precision::F32);
    let packed = pack(&rtn_quantize(&w, bits, 0)?)?;
    print!("{}", format_bench(&matvec_bench(&packed, trials)?));
    Ok(())
}
