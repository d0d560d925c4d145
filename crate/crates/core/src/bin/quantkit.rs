use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use quantkit::commands::{self, EvalArgs, GenArgs, QuantizeArgs};
use quantkit::gptq::{GroupGridPolicy, DEFAULT_BLOCK_SIZE, DEFAULT_DAMP_FRACTION};
use quantkit::pipeline::{Method, DEFAULT_CALIBRATION_COLS, DEFAULT_EVAL_COLS};
use quantkit::{ErrorKind, Precision, QuantError};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GroupPolicyArg {
    Original,
    Refit,
}

#[derive(Debug, Parser)]
#[command(
    name = "quantkit",
    version,
    about = "Second-order post-training weight quantization"
)]
struct Cli {
    /// Seed for generated data.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Element precision of generated fixtures and of the solver's weight updates.
    #[arg(long, global = true, value_enum, default_value = "f32")]
    precision: PrecisionArg,
    /// Worker threads (falls back to QUANTKIT_THREADS).
    #[arg(long, global = true, env = "QUANTKIT_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded MLP fixture (manifest, weights, calibration).
    Gen {
        #[arg(long, default_value_t = 1)]
        layers: usize,
        #[arg(long)]
        dims: usize,
        #[arg(long, default_value_t = DEFAULT_CALIBRATION_COLS)]
        calib_cols: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Quantize every layer of a manifest into GPTQPACK files.
    Quantize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        bits: u32,
        #[arg(long, default_value_t = 0)]
        group: usize,
        #[arg(long, default_value_t = DEFAULT_BLOCK_SIZE)]
        block: usize,
        #[arg(long, default_value_t = DEFAULT_DAMP_FRACTION)]
        damp: f64,
        #[arg(long, value_enum, default_value = "gptq")]
        method: Method,
        /// Calibrate each layer on the outputs of the quantized prefix.
        #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
        propagate: bool,
        #[arg(long, value_enum, default_value = "refit")]
        group_policy: GroupPolicyArg,
        #[arg(long, default_value_t = DEFAULT_EVAL_COLS)]
        eval_cols: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate packed layers against the full-precision model.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        quantized_dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_EVAL_COLS)]
        eval_cols: usize,
    },
    /// Time the packed matvec against a dense float32 matvec.
    Bench {
        #[arg(long)]
        pack_file: PathBuf,
        #[arg(long, default_value_t = 10)]
        trials: usize,
    },
}

fn run(cli: Cli) -> Result<(), QuantError> {
    let precision: Precision = cli.precision.into();
    match cli.command {
        Command::Gen {
            layers,
            dims,
            calib_cols,
            out_dir,
        } => {
            let path = commands::gen(&GenArgs {
                layers,
                dims,
                calib_cols,
                seed: cli.seed,
                precision,
                out_dir,
            })?;
            println!("{}", path.display());
        }
        Command::Quantize {
            manifest,
            bits,
            group,
            block,
            damp,
            method,
            propagate,
            group_policy,
            eval_cols,
            out_dir,
        } => {
            let report = commands::quantize(&QuantizeArgs {
                manifest,
                bits,
                group,
                block,
                damp,
                method,
                propagate,
                precision,
                group_policy: match group_policy {
                    GroupPolicyArg::Original => GroupGridPolicy::OriginalWeights,
                    GroupPolicyArg::Refit => GroupGridPolicy::RefitAtBlockEntry,
                },
                eval_cols,
                out_dir,
            })?;
            println!("{}", report.to_json());
        }
        Command::Eval {
            manifest,
            quantized_dir,
            eval_cols,
        } => {
            let report = commands::eval(&EvalArgs {
                manifest,
                quantized_dir,
                eval_cols,
            })?;
            println!("{}", report.to_json());
        }
        Command::Bench { pack_file, trials } => {
            print!(
                "{}",
                commands::format_bench(&commands::bench(&pack_file, trials)?)
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Validation => 2,
                ErrorKind::Numerical => 3,
                ErrorKind::Io => 4,
            })
        }
    }
}
