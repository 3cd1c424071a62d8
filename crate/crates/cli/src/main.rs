mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use modulora::train::{Activation, Schedule, TaskKind};
use modulora::MaterializationStrategy;

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(
    name = "modulora",
    version,
    about = "Finetune low-rank adapters on quantized toy models"
)]
struct Cli {
    /// Global seed; falls back to MODULORA_SEED, then 0.
    #[arg(long, global = true, env = "MODULORA_SEED", default_value_t = 0)]
    seed: u64,

    /// Report format written to stdout.
    #[arg(long, global = true, value_enum, default_value_t = ReportFormat::Text)]
    report: ReportFormat,

    /// Also write the JSON report to this file.
    #[arg(long, global = true)]
    report_file: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Json,
    Text,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Quantize a seeded random model and write a checkpoint.
    Quantize(QuantizeArgs),
    /// Train the adapters of a checkpoint on a synthetic task.
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint, with and without its adapters.
    Eval(EvalArgs),
    /// Describe the layers stored in a checkpoint.
    Inspect(InspectArgs),
    /// Peak materialized bytes of one training step under each strategy.
    BenchMemory(BenchMemoryArgs),
    /// Wide low-bit model against a narrow 8-bit one at equal code bits.
    BenchBits(BenchBitsArgs),
}

#[derive(Args, Debug)]
pub struct QuantizeArgs {
    /// Output checkpoint path.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Layer widths of the random model, input first.
    #[arg(long, value_delimiter = ',', default_value = "16,32,16")]
    pub dims: Vec<usize>,
    #[arg(long, value_parser = parse_activation, default_value = "tanh")]
    pub activation: Activation,
    #[arg(long, default_value_t = 4, value_parser = parse_bits)]
    pub bits: u8,
    #[arg(long, default_value = "rtn", value_parser = ["rtn", "optq"])]
    pub quantizer: String,
    /// Columns per quantization group; defaults to the full row.
    #[arg(long)]
    pub group_size: Option<usize>,
    /// Calibration inputs: a JSONL file with an "x" array per line, or random:N.
    #[arg(long)]
    pub calib: Option<String>,
    #[arg(long, default_value_t = modulora::quant::DEFAULT_DAMPING)]
    pub damping: f64,
    #[command(flatten)]
    pub adapter: AdapterArgs,
}

#[derive(Args, Debug)]
pub struct AdapterArgs {
    #[arg(long, default_value_t = 8)]
    pub rank: usize,
    #[arg(long, default_value_t = 32.0)]
    pub alpha: f64,
    #[arg(long, value_parser = parse_strategy, default_value = "weight")]
    pub materialize: MaterializationStrategy,
}

#[derive(Args, Debug)]
pub struct TaskArgs {
    #[arg(long, value_parser = parse_task, default_value = "teacher_residual_regression")]
    pub task: TaskKind,
    /// Seed of the task generator; defaults to the global seed.
    #[arg(long)]
    pub task_seed: Option<u64>,
    #[arg(long, default_value_t = 192)]
    pub n_train: usize,
    #[arg(long, default_value_t = 64)]
    pub n_test: usize,
    #[arg(long, default_value_t = 2)]
    pub delta_rank: usize,
    /// JSONL dataset cache: read if present, otherwise generated and written.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[arg(long, short)]
    pub checkpoint: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long, default_value_t = 300)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.0)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.0)]
    pub warmup_ratio: f64,
    #[arg(long, value_parser = parse_schedule, default_value = "constant")]
    pub schedule: Schedule,
    /// Overrides the strategy stored in the checkpoint for this run only.
    #[arg(long, value_parser = parse_strategy)]
    pub materialize: Option<MaterializationStrategy>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, short)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub task: TaskArgs,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[arg(long, short)]
    pub checkpoint: PathBuf,
}

#[derive(Args, Debug)]
pub struct BenchMemoryArgs {
    #[arg(long, short)]
    pub checkpoint: PathBuf,
    /// Strategies to measure; all by default.
    #[arg(long, value_delimiter = ',', value_parser = parse_strategy)]
    pub materialize: Vec<MaterializationStrategy>,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
}

#[derive(Args, Debug)]
pub struct BenchBitsArgs {
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 150)]
    pub steps: usize,
    #[arg(long, default_value_t = 4)]
    pub rank: usize,
}

fn parse_bits(s: &str) -> Result<u8, String> {
    match s.parse::<u8>() {
        Ok(b @ (2 | 3 | 4 | 8)) => Ok(b),
        _ => Err(format!("bits must be one of 2, 3, 4, 8 (got {s})")),
    }
}

fn parse_strategy(s: &str) -> Result<MaterializationStrategy, String> {
    s.parse().map_err(|e: modulora::Error| e.to_string())
}

fn parse_activation(s: &str) -> Result<Activation, String> {
    s.parse().map_err(|e: modulora::Error| e.to_string())
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    s.parse().map_err(|e: modulora::Error| e.to_string())
}

fn parse_schedule(s: &str) -> Result<Schedule, String> {
    s.parse().map_err(|e: modulora::Error| e.to_string())
}

pub struct Output {
    pub format: ReportFormat,
    pub file: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let out = Output {
        format: cli.report,
        file: cli.report_file,
    };
    let seed = cli.seed;
    match cli.command {
        Command::Quantize(a) => commands::quantize(&a, seed, &out),
        Command::Finetune(a) => commands::finetune(&a, seed, &out),
        Command::Eval(a) => commands::eval(&a, seed, &out),
        Command::Inspect(a) => commands::inspect(&a, &out),
        Command::BenchMemory(a) => commands::bench_memory(&a, seed, &out),
        Command::BenchBits(a) => commands::bench_bits(&a, seed, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
