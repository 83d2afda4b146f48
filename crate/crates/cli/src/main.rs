//! `gat`: data synthesis, training, sampling, learning-rate probes and
//! analysis reports.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 I/O error,
//! 4 training divergence, 5 malformed data or checkpoint.

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "gat", version, about = "Generative adversarial transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize or inspect GLT1 latent files.
    #[command(subcommand)]
    Data(DataCommand),
    /// Train from a JSON run configuration.
    Train(TrainArgs),
    /// Sample latents from a checkpoint's EMA generator.
    Sample(SampleArgs),
    /// Measure the update magnitude across widths.
    ProbeLr(ProbeArgs),
    /// Emit analysis reports.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
}

#[derive(Debug, Subcommand)]
enum DataCommand {
    Synth(SynthArgs),
    Inspect(InspectArgs),
}

#[derive(Debug, Subcommand)]
enum AnalyzeCommand {
    /// Per-block contribution by ablation.
    Blocks(BlocksArgs),
    /// Top-3 PCA of every block's token features.
    Pca(PcaArgs),
    /// Frechet distance on teacher features.
    Fid(FidArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: std::path::PathBuf,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    #[arg(long, default_value_t = 4)]
    pub channels: usize,
    #[arg(long, default_value_t = 8)]
    pub hw: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct InspectArgs {
    pub path: std::path::PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: std::path::PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<std::path::PathBuf>,
    /// Output directory for the metric log and checkpoints.
    #[arg(long, default_value = "run")]
    pub out: std::path::PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: std::path::PathBuf,
    #[arg(long)]
    pub class: usize,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    /// Truncation towards the class mean style.
    #[arg(long)]
    pub psi: Option<f64>,
    /// Guidance strength on the leading blocks.
    #[arg(long)]
    pub guidance: Option<f64>,
    /// Fraction of leading blocks that receive guidance.
    #[arg(long, default_value_t = 0.3)]
    pub guidance_fraction: f64,
    #[arg(long, value_enum, default_value_t = Order::TruncateThenGuide)]
    pub order: Order,
    /// Latents per class for the style means.
    #[arg(long, default_value_t = 1024)]
    pub stats_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: std::path::PathBuf,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Order {
    TruncateThenGuide,
    GuideThenTruncate,
}

#[derive(Debug, Args, Serialize)]
pub struct ProbeArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    pub widths: Vec<usize>,
    /// Base learning rate; adapted per width when `--adapted true`.
    #[arg(long, default_value_t = 4e-4)]
    pub eta: f64,
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    pub adapted: bool,
    /// Number of seeds, starting at 0.
    #[arg(long, default_value_t = 5)]
    pub seeds: u64,
    #[arg(long, default_value_t = 384)]
    pub c_base: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub depth: usize,
    /// `A:B` trains width A with width B's adapted learning rate and the
    /// matched setting, reporting divergence and slow progress.
    #[arg(long)]
    pub cross_check: Option<String>,
    #[arg(long, default_value_t = 200)]
    pub cross_steps: u64,
    /// JSON report path; the table always goes to stdout.
    #[arg(long)]
    pub out: Option<std::path::PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct BlocksArgs {
    #[arg(long)]
    pub checkpoint: std::path::PathBuf,
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Measure distances on teacher features instead of latents.
    #[arg(long)]
    pub teacher: bool,
    #[arg(long)]
    pub out: std::path::PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PcaArgs {
    #[arg(long)]
    pub checkpoint: std::path::PathBuf,
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: std::path::PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct FidArgs {
    /// Reference GLT1 file.
    #[arg(long)]
    pub reference: std::path::PathBuf,
    /// Candidate GLT1 file.
    #[arg(long, conflicts_with = "checkpoint")]
    pub candidate: Option<std::path::PathBuf>,
    /// Generate candidates from this checkpoint using the reference labels.
    #[arg(long, required_unless_present = "candidate")]
    pub checkpoint: Option<std::path::PathBuf>,
    /// Samples taken from each side; all by default.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<std::path::PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Data(DataCommand::Synth(a)) => commands::data_synth(&a),
        Command::Data(DataCommand::Inspect(a)) => commands::data_inspect(&a),
        Command::Train(a) => commands::train(&a),
        Command::Sample(a) => commands::sample(&a),
        Command::ProbeLr(a) => commands::probe_lr(&a),
        Command::Analyze(AnalyzeCommand::Blocks(a)) => commands::analyze_blocks(&a),
        Command::Analyze(AnalyzeCommand::Pca(a)) => commands::analyze_pca(&a),
        Command::Analyze(AnalyzeCommand::Fid(a)) => commands::analyze_fid(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.kind.code())
        }
    }
}
