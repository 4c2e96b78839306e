//! Subcommands of the `ctts` binary.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

pub mod bench;
pub mod config;
pub mod eval;
pub mod synth;
pub mod train;

#[derive(Debug, Parser)]
#[command(name = "ctts", version, about = "Price-sign forecasting with a convolutional transformer and baselines")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic price-series dataset as CSV.
    Synth(SynthArgs),
    /// Train CTTS or DeepAR-lite on a CSV dataset.
    Train(Box<TrainArgs>),
    /// Compare methods on a test dataset.
    Bench(BenchArgs),
    /// Score a single checkpoint on a dataset.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// key = value file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// random_walk, momentum_ar1, sinusoid_noise or tick_quantized.
    #[arg(long)]
    pub regime: Option<String>,
    /// Number of series.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Prices per series (at least 81).
    #[arg(long)]
    pub length: Option<usize>,
    #[arg(long)]
    pub start_price: Option<f64>,
    #[arg(long)]
    pub drift: Option<f64>,
    #[arg(long)]
    pub vol: Option<f64>,
    #[arg(long)]
    pub phi: Option<f64>,
    #[arg(long)]
    pub tick: Option<f64>,
    #[arg(long)]
    pub period: Option<f64>,
    #[arg(long)]
    pub amplitude: Option<f64>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    /// Output CSV (default: $CTTS_OUT_DIR/series.csv).
    #[arg(long)]
    pub out: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// ctts or deepar.
    #[arg(long)]
    pub model: Option<String>,
    /// Training CSV.
    #[arg(long)]
    pub data: Option<String>,
    /// Separate validation CSV; without it a fraction of the series is held out.
    #[arg(long)]
    pub val_data: Option<String>,
    #[arg(long)]
    pub val_frac: Option<f64>,
    /// Offset between consecutive windows cut from one series.
    #[arg(long)]
    pub window_stride: Option<usize>,
    /// Absolute tolerance for a flat ground-truth label.
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub drop: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub kernel: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub mlp_ratio: Option<usize>,
    /// class_token or mean.
    #[arg(long)]
    pub pooling: Option<String>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// Forecast samples per window.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub lr_patience: Option<usize>,
    #[arg(long)]
    pub lr_factor: Option<f64>,
    /// Continue from this CTTS checkpoint; epoch numbering carries on.
    #[arg(long)]
    pub resume: Option<String>,
    /// Checkpoint path (default: $CTTS_OUT_DIR/<model>.ckpt).
    #[arg(long)]
    pub out: Option<String>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Test CSV.
    #[arg(long)]
    pub data: Option<String>,
    /// CTTS checkpoint.
    #[arg(long)]
    pub checkpoint: Option<String>,
    #[arg(long)]
    pub deepar_checkpoint: Option<String>,
    /// Comma list from ctts, deepar, arima, ema, const-up, const-down, const-flat.
    #[arg(long)]
    pub methods: Option<String>,
    /// Flat band for EMA, ARIMA and DeepAR-lite, in units of the window std.
    #[arg(long)]
    pub tau: Option<f64>,
    /// ARIMA order as p,d,q.
    #[arg(long)]
    pub arima_order: Option<String>,
    /// DeepAR-lite sampling seed (default: the checkpoint's).
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub window_stride: Option<usize>,
    #[arg(long)]
    pub eps: Option<f64>,
    /// Report path (default: $CTTS_OUT_DIR/report.txt).
    #[arg(long)]
    pub out: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<String>,
    /// CTTS or DeepAR-lite checkpoint.
    #[arg(long)]
    pub checkpoint: Option<String>,
    #[arg(long)]
    pub window_stride: Option<usize>,
    #[arg(long)]
    pub eps: Option<f64>,
    /// Records file (default: print only).
    #[arg(long)]
    pub out: Option<String>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth::run(a),
        Command::Train(a) => train::run(*a),
        Command::Bench(a) => bench::run(a),
        Command::Eval(a) => eval::run(a),
    }
}
