//! `morphgrad` command-line entry point.

mod bench;
mod config;
mod fail;
mod filter;
mod gendata;
mod pgm;
mod report;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fail::Failure;

#[derive(Parser)]
#[command(name = "morphgrad", version, about = "Differentiable 3D morphology experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic nested-ellipsoid dataset as MORV1 volumes.
    GenData {
        /// JSON dataset spec.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply one morphological operator to a MORV1 volume.
    Filter {
        #[arg(long = "in")]
        input: PathBuf,
        /// erode | dilate | open | close
        #[arg(long)]
        op: String,
        /// flat | chm
        #[arg(long = "impl")]
        implementation: String,
        /// CHM power magnitude; erosion uses -|P|, dilation +|P|.
        #[arg(long, allow_negative_numbers = true)]
        p: Option<f64>,
        /// Window extents `d,h,w`.
        #[arg(long, default_value = "3,3,3")]
        window: String,
        #[arg(long)]
        out: PathBuf,
        /// Also write mid-axis cross-sections of channel 0 as PGM images.
        #[arg(long)]
        slice_pgm: Option<PathBuf>,
    },
    /// Run k-fold training of one network variant.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// baseline | nonlearnable | nonlearnable-skip | chm | chm-skip
        #[arg(long)]
        variant: String,
        /// JSON run config with optional `network`, `train` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate ensemble metrics of finished runs, one row per variant.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// tensor | morph | block | network
        #[arg(long)]
        scope: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time the core operators and one training step.
    Bench {
        /// Cubic volume extent.
        #[arg(long, default_value_t = 32)]
        extent: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData { spec, out } => gendata::run(&spec, &out),
        Command::Filter {
            input,
            op,
            implementation,
            p,
            window,
            out,
            slice_pgm,
        } => filter::run(&filter::Args {
            input,
            op,
            implementation,
            power: p,
            window,
            out,
            slice_pgm,
        }),
        Command::Train {
            data,
            variant,
            config,
            out,
        } => train::run(&data, &variant, config.as_deref(), &out),
        Command::Compare { runs, out } => report::compare(&runs, &out),
        Command::Gradcheck { scope, seed } => gradcheck(&scope, seed),
        Command::Bench { extent, repeats } => bench::run(extent, repeats),
    }
}

fn gradcheck(scope: &str, seed: u64) -> Result<(), Failure> {
    let scope = morphgrad::gradcheck::Scope::parse(scope)?;
    let results = morphgrad::gradcheck::run_scope(scope, seed)?;
    println!("gradcheck scope={} seed={seed}", scope.name());
    for r in &results {
        println!("{r}");
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        println!("all {} checks passed", results.len());
        Ok(())
    } else {
        Err(Failure::Verification(format!(
            "gradient check failed for: {}",
            failed.join(", ")
        )))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
