//! `aot`: generate token batches, run the unrolled denoiser, verify the
//! exact SNR rate, check the concentration lemmas, train layer bases and
//! plot SNR traces.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

/// Exit status of a completed verification that did not pass.
pub const EXIT_VERIFY_FAIL: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "aot", version, about = "Attention-only transformer as unrolled subspace denoising")]
struct Cli {
    /// Directory for every artifact written by the command.
    #[arg(long, global = true, env = "AOT_OUT_DIR", default_value = ".")]
    out_dir: PathBuf,

    /// key=value file of flag defaults; flags given on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample subspace bases and a token batch.
    #[command(args_override_self = true)]
    Generate(GenerateArgs),
    /// Run tokens from a generated batch through the unrolled layers.
    #[command(args_override_self = true)]
    Denoise(DenoiseArgs),
    /// Check the exact per-layer SNR rate under thresholded attention.
    #[command(args_override_self = true)]
    Verify(VerifyArgs),
    /// Monte Carlo check of a concentration or attention-pattern lemma.
    #[command(args_override_self = true)]
    LemmaCheck(LemmaArgs),
    /// Learn per-layer bases by gradient descent on a denoising loss.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// SNR table and chart from a saved trace.
    #[command(args_override_self = true)]
    Plot(PlotArgs),
}

const SUBCOMMANDS: [&str; 6] = ["generate", "denoise", "verify", "lemma-check", "train", "plot"];

#[derive(Debug, Clone, Args, Serialize)]
struct DimsArgs {
    /// Ambient dimension.
    #[arg(long, default_value_t = 128)]
    d: usize,
    /// Number of subspaces (clusters).
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Dimension of each subspace.
    #[arg(long, default_value_t = 32)]
    p: usize,
    #[arg(long, default_value_t = 256)]
    tokens_per_cluster: usize,
    /// Noise scale.
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
struct GenerateArgs {
    #[command(flatten)]
    dims: DimsArgs,
    #[arg(long)]
    seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
struct DenoiseArgs {
    /// Manifest written by `generate`.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 8)]
    layers: usize,
    #[arg(long, default_value_t = 0.5)]
    eta: f64,
    /// `softmax`, `softmax@T` or `threshold:TAU`.
    #[arg(long, default_value = "softmax")]
    phi: String,
    #[arg(long)]
    causal: bool,
    #[arg(long)]
    prenorm: bool,
    /// Trace output, relative to the output directory.
    #[arg(long, default_value = "trace.json")]
    trace: PathBuf,
    /// Final state output, relative to the output directory.
    #[arg(long, default_value = "state.csv")]
    state: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
struct VerifyArgs {
    #[command(flatten)]
    dims: DimsArgs,
    #[arg(long, default_value_t = 0.5)]
    eta: f64,
    #[arg(long, default_value_t = 0.8)]
    tau: f64,
    #[arg(long, default_value_t = 8)]
    layers: usize,
    #[arg(long)]
    seed: u64,
    /// Number of consecutive seeds to run, starting at --seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Also write an SVG chart of the first run.
    #[arg(long)]
    svg: bool,
    #[arg(long)]
    log_scale: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Lemma {
    /// Norm concentration of a Gaussian vector.
    A1,
    /// Norm, inner-product and softmax bounds on the latent factors.
    A2,
    /// Block-diagonal thresholded attention.
    A3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum LogBaseArg {
    Natural,
    Two,
}

#[derive(Debug, Clone, Args, Serialize)]
struct LemmaArgs {
    #[arg(long, value_enum)]
    lemma: Lemma,
    #[command(flatten)]
    dims: DimsArgs,
    /// Deviation allowance of the norm bound (a1).
    #[arg(long, default_value_t = 3.0)]
    t: f64,
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, value_enum, default_value_t = LogBaseArg::Natural)]
    log_base: LogBaseArg,
    /// Signal scale (a3).
    #[arg(long, default_value_t = 1.0)]
    theta: f64,
    /// Threshold (a3).
    #[arg(long, default_value_t = 0.8)]
    tau: f64,
    /// Number of seeds swept (a3).
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long)]
    seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
struct TrainArgs {
    #[arg(long, default_value_t = 32)]
    d: usize,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 4)]
    p: usize,
    #[arg(long, default_value_t = 128)]
    tokens_per_cluster: usize,
    #[arg(long, default_value_t = 0.3)]
    delta: f64,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    /// Weight of the orthonormality penalty.
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0.5)]
    eta: f64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Heavy-ball momentum 0.9 instead of plain gradient descent.
    #[arg(long)]
    momentum: bool,
    #[arg(long)]
    seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
struct PlotArgs {
    /// Trace written by `denoise` or `verify`.
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, default_value = "snr.csv")]
    csv: PathBuf,
    #[arg(long, default_value = "snr.svg")]
    svg: PathBuf,
    #[arg(long)]
    log_scale: bool,
}

fn main() -> ExitCode {
    let raw: Vec<String> = std::env::args().collect();
    let args = match config::expand(raw, &SUBCOMMANDS) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(&cli, &args) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
