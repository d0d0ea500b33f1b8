//! `lrq` — batch front end for the quantization toolkit.
//!
//! Subcommands: `synth` (deterministic synthetic corpora), `calibrate`
//! (smoothing + rotation plans), `quantize` (weight artifacts), `simulate`
//! (integer-pipeline execution against the float reference), `report`
//! (CSV/JSON error reports, optionally with the scheme-x-rotation ablation
//! grid). Exit codes: 0 success, 1 runtime failure (single-line diagnostic
//! on stderr), 2 usage errors.

mod config;
mod corpus;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::ConfigArgs;

#[derive(Parser)]
#[command(name = "lrq", version, about = "Low-bit rotation quantization toolkit")]
struct Cli {
    /// Configuration file (JSON mirroring the config keys); falls back to
    /// the LRQ_CONFIG environment variable when not given
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for layer-level parallelism [default: available cores]
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic corpus of layers
    Synth(SynthArgs),
    /// Compute smoothing vectors and rotation plans from calibration data
    Calibrate(CalibrateArgs),
    /// Quantize layer weights into container artifacts
    Quantize(QuantizeArgs),
    /// Execute quantized layers on evaluation data and collect error metrics
    Simulate(SimulateArgs),
    /// Write CSV/JSON error reports from a run directory
    Report(ReportArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output corpus directory
    #[arg(long)]
    pub out: PathBuf,
    /// Number of layers to generate [default: 4]
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    /// Weight rows (output channels) [default: 64]
    #[arg(long, default_value_t = 64)]
    pub rows: usize,
    /// Weight cols (input channels) [default: 64]
    #[arg(long, default_value_t = 64)]
    pub cols: usize,
    /// Weight standard deviation [default: 0.02]
    #[arg(long, default_value_t = 0.02)]
    pub sigma: f64,
    /// Fraction of weights boosted into the tail [default: 0.01]
    #[arg(long, default_value_t = 0.01)]
    pub tail_fraction: f64,
    /// Tail multiplier [default: 8]
    #[arg(long, default_value_t = 8.0)]
    pub tail_scale: f64,
    /// Base RNG seed; everything derives deterministically from it [default: 0]
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Calibration batches per layer [default: 8, from the 4-10 prompt rule]
    #[arg(long, default_value_t = 8)]
    pub batches: usize,
    /// Tokens per batch [default: 32]
    #[arg(long, default_value_t = 32)]
    pub tokens: usize,
    /// Activation standard deviation [default: 1.0]
    #[arg(long, default_value_t = 1.0)]
    pub act_sigma: f64,
    /// How many layers receive salient outlier channels [default: 1]
    #[arg(long, default_value_t = 1)]
    pub salient_layers: usize,
    /// Salient channels per affected layer [default: 2]
    #[arg(long, default_value_t = 2)]
    pub salient_channels: usize,
    /// Scale applied to salient channels [default: 50]
    #[arg(long, default_value_t = 50.0)]
    pub salient_scale: f64,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Corpus directory produced by `synth` (or laid out the same way)
    #[arg(long)]
    corpus: PathBuf,
    /// Run directory to write plans and calibration.json into
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct QuantizeArgs {
    /// Corpus directory
    #[arg(long)]
    corpus: PathBuf,
    /// Run directory for artifacts and quantize.json
    #[arg(long)]
    out: PathBuf,
    /// Reuse an existing calibration run instead of calibrating inline
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SimulateArgs {
    /// Corpus directory holding the evaluation activations
    #[arg(long)]
    corpus: PathBuf,
    /// Run directory produced by `quantize`
    #[arg(long)]
    run: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory holding simulate.json or quantize.json
    #[arg(long)]
    run: PathBuf,
    /// Directory for report.csv / summary.json
    #[arg(long)]
    out: PathBuf,
    /// Also run the quantizer-x-rotation ablation grid (needs --corpus)
    #[arg(long, default_value_t = false)]
    ablation: bool,
    /// Corpus directory for the ablation rerun
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()?;
    }
    match cli.command {
        Command::Synth(args) => stages::synth(&args),
        Command::Calibrate(args) => {
            let config = config::resolve(cli.config.as_deref(), &args.config)?;
            stages::calibrate(&args.corpus, &args.out, &config)
        }
        Command::Quantize(args) => {
            let config = config::resolve(cli.config.as_deref(), &args.config)?;
            stages::quantize(&args.corpus, &args.out, args.calibration.as_deref(), &config)
        }
        Command::Simulate(args) => {
            let config = config::resolve(cli.config.as_deref(), &args.config)?;
            stages::simulate(&args.corpus, &args.run, &config)
        }
        Command::Report(args) => {
            let config = config::resolve(cli.config.as_deref(), &args.config)?;
            stages::report(
                &args.run,
                &args.out,
                args.ablation,
                args.corpus.as_deref(),
                &config,
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse(); // usage errors exit with code 2
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
