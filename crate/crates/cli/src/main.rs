use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

mod commands;
mod manifest;

/// Probabilistic human-motion forecasting with an invertible pose flow.
#[derive(Parser, Debug)]
#[command(name = "probmotion", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic multimodal motion dataset.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Forecast the future of one observed sequence.
    Forecast(ForecastArgs),
    /// Best-of-samples accuracy and diversity (APD/ADE/FDE/MMADE/MMFDE).
    EvalDiverse(EvalDiverseArgs),
    /// Angle error of the mean rollout at fixed horizons.
    EvalDet(EvalDetArgs),
    /// Empirical quantile calibration and latent coverage.
    EvalCalib(EvalCalibArgs),
    /// Few-sample random against Poisson-disk sampling over many seeds.
    EvalSampling(EvalSamplingArgs),
    /// Print a checkpoint header.
    Inspect(InspectArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Forecast(_) => "forecast",
            Command::EvalDiverse(_) => "eval-diverse",
            Command::EvalDet(_) => "eval-det",
            Command::EvalCalib(_) => "eval-calib",
            Command::EvalSampling(_) => "eval-sampling",
            Command::Inspect(_) => "inspect",
        }
    }
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// JSON config; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub set: SynthFlags,
}

#[derive(Args, Debug, Serialize)]
pub struct SynthFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub joints: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_sequences: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub length: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fps: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_modes: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub branch_frame: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_std: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_prefixes: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode_gain: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode_jitter: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON config; flags override its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Every n-th sequence is held out and not trained on; 0 trains on all.
    #[arg(long, default_value_t = 5)]
    pub holdout_every: usize,
    #[command(flatten)]
    pub set: TrainFlags,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainFlags {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_obs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_pred: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_loss: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma_floor: Option<f64>,
    #[arg(long, action = ArgAction::Set)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scaling_layer: Option<bool>,
    #[arg(long, action = ArgAction::Set)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub part_aware_prediction: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coupling: Option<CouplingArg>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingArg {
    Gcn,
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
pub enum StrategyArg {
    Mean,
    Random,
    Quantile,
    PoissonDisk,
}

/// Which sequences of the data file become evaluation cases.
#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
pub enum SplitArg {
    Test,
    Train,
    All,
}

/// Where pseudo ground-truth futures are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
pub enum PoolArg {
    /// The evaluation cases themselves.
    Split,
    /// Every sequence of the data file.
    All,
}

#[derive(Args, Debug)]
pub struct CaseArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long, default_value_t = 5)]
    pub holdout_every: usize,
    /// Use at most this many cases, in file order.
    #[arg(long)]
    pub max_cases: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ForecastArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Motion file holding the observed sequence.
    #[arg(long)]
    pub obs: PathBuf,
    #[arg(long)]
    pub id: String,
    #[arg(long, value_enum, default_value_t = StrategyArg::Mean)]
    pub strategy: StrategyArg,
    #[arg(long, default_value_t = 0.5)]
    pub q: f64,
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    /// Poisson-disk radius in whitened latent units; defaults to sqrt(2D).
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long, default_value_t = 100)]
    pub max_tries: usize,
    /// Observed frames; defaults to the checkpoint's t_obs.
    #[arg(long)]
    pub t_obs: Option<usize>,
    /// Frames to forecast; defaults to the checkpoint's k_pred.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Output JSON; defaults to forecast.json.
    #[arg(long, default_value = "forecast.json")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalDiverseArgs {
    #[command(flatten)]
    pub cases: CaseArgs,
    #[arg(long, default_value_t = 50)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = StrategyArg::Random)]
    pub strategy: StrategyArg,
    #[arg(long, default_value_t = 0.5)]
    pub q: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long, default_value_t = 100)]
    pub max_tries: usize,
    #[arg(long, default_value_t = probmotion::eval::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, value_enum, default_value_t = PoolArg::Split)]
    pub pool: PoolArg,
    /// Output prefix: writes `<out>.csv`, `<out>.json` and `<out>.manifest.json`.
    #[arg(long, default_value = "eval-diverse")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalDetArgs {
    #[command(flatten)]
    pub cases: CaseArgs,
    /// 1-based future frames.
    #[arg(long, value_delimiter = ',', default_value = "2,4,8,10")]
    pub horizons: Vec<usize>,
    #[arg(long, default_value = "eval-det")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalCalibArgs {
    #[command(flatten)]
    pub cases: CaseArgs,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.45,0.4,0.25")]
    pub quantiles: Vec<f64>,
    #[arg(long, default_value_t = probmotion::eval::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, default_value_t = probmotion::eval::MIN_PSEUDO_FUTURES)]
    pub min_pseudo: usize,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Central region whose latent coverage is reported.
    #[arg(long, default_value_t = 0.8)]
    pub coverage_level: f64,
    #[arg(long, value_enum, default_value_t = PoolArg::All)]
    pub pool: PoolArg,
    #[arg(long, default_value = "eval-calib")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalSamplingArgs {
    #[command(flatten)]
    pub cases: CaseArgs,
    #[arg(long, default_value_t = 5)]
    pub s_small: usize,
    #[arg(long, default_value_t = 50)]
    pub s_large: usize,
    /// Runs seeds `0..seeds`.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    #[arg(long)]
    pub radius: Option<f64>,
    #[arg(long, default_value_t = 100)]
    pub max_tries: usize,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = probmotion::eval::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, value_enum, default_value_t = PoolArg::Split)]
    pub pool: PoolArg,
    #[arg(long, default_value = "eval-sampling")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Also write the header as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or invalid setting; exit code 1.
    Usage(String),
    /// Unreadable, malformed or incompatible data or model; exit code 2.
    Data(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Data(format!("input file not found: {}", path.display()))
        } else {
            CliError::Data(format!("cannot access {}: {e}", path.display()))
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "error: {m}"),
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("PROBMOTION_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("PROBMOTION_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot configure {n} threads: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = configure_threads().and_then(|()| commands::run(&cli.command, &argv));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
