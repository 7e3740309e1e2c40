//! `modeseq` — experiment runner for the mode-sequence trajectory predictor.
//!
//! Subcommands: `generate` synthetic datasets, `train` a model, `eval` a
//! checkpoint into metric reports, `bench` decode latency, and `report`
//! ablation tables from finished runs. Every run writes a manifest first and
//! is reproducible from that manifest's argv.

mod cmd_bench;
mod cmd_eval;
mod cmd_generate;
mod cmd_report;
mod cmd_train;
mod config;
mod error;
mod runs;

use clap::{Args, Parser, Subcommand, ValueEnum};
use modeseq::assign::{DistanceMode, IgnoredVariant, Strategy};
use modeseq::decoder::DecoderVariant;
use modeseq::metrics::JointMissRule;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "modeseq",
    version,
    about = "Sequential multimodal trajectory prediction experiments",
    after_help = "Output root: --out-root, else $MODESEQ_OUT, else ./runs.\n\
                  Exit codes: 0 ok, 2 config, 3 data, 4 numeric, 5 io."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset and its manifest.
    Generate(GenerateArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint: per-layer and final metric reports.
    Eval(EvalArgs),
    /// Time recurrent vs parallel decoding across mode counts.
    Bench(BenchArgs),
    /// Join finished runs into an ablation table.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Recurrent,
    Parallel,
}

impl From<VariantArg> for DecoderVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Recurrent => DecoderVariant::Recurrent,
            VariantArg::Parallel => DecoderVariant::Parallel,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Emta,
    Wta,
}

impl From<StrategyArg> for Strategy {
    fn from(v: StrategyArg) -> Self {
        match v {
            StrategyArg::Emta => Strategy::Emta,
            StrategyArg::Wta => Strategy::Wta,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum IgnoredArg {
    None,
    OtherMatches,
    EarlyMismatches,
}

impl From<IgnoredArg> for IgnoredVariant {
    fn from(v: IgnoredArg) -> Self {
        match v {
            IgnoredArg::None => IgnoredVariant::None,
            IgnoredArg::OtherMatches => IgnoredVariant::OtherMatches,
            IgnoredArg::EarlyMismatches => IgnoredVariant::EarlyMismatches,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DistanceArg {
    Endpoint,
    Average,
}

impl From<DistanceArg> for DistanceMode {
    fn from(v: DistanceArg) -> Self {
        match v {
            DistanceArg::Endpoint => DistanceMode::Endpoint,
            DistanceArg::Average => DistanceMode::Average,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MissRuleArg {
    AnyAgent,
    AllAgents,
}

impl From<MissRuleArg> for JointMissRule {
    fn from(v: MissRuleArg) -> Self {
        match v {
            MissRuleArg::AnyAgent => JointMissRule::AnyAgentMisses,
            MissRuleArg::AllAgents => JointMissRule::AllAgentsMiss,
        }
    }
}

/// on/off for flags that override a boolean config key.
#[derive(Clone, Copy, ValueEnum)]
enum SwitchArg {
    On,
    Off,
}

impl From<SwitchArg> for bool {
    fn from(v: SwitchArg) -> bool {
        matches!(v, SwitchArg::On)
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// Scene family: fork3 (or fork2..fork8) | interactive.
    #[arg(long)]
    preset: String,
    /// Branch-pair coupling for interactive scenes.
    #[arg(long, value_enum, default_value = "yield-or-proceed")]
    coupling: CouplingArg,
    /// Number of scenes.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset directory (default: <out-root>/datasets/<preset>-n<n>-seed<seed>).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    out_root: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CouplingArg {
    YieldOrProceed,
    Independent,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest produced by `generate`.
    #[arg(long)]
    data: PathBuf,
    /// TOML config file layered over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset: desk | paper.
    #[arg(long, default_value = "desk")]
    preset: String,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    #[arg(long, value_enum)]
    ignored: Option<IgnoredArg>,
    #[arg(long, value_enum)]
    distance: Option<DistanceArg>,
    #[arg(long, value_enum)]
    rearrange: Option<SwitchArg>,
    #[arg(long, value_enum)]
    causal: Option<SwitchArg>,
    /// Train the joint (multi-agent) decoder.
    #[arg(long)]
    joint: bool,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    modes: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    lambda_cls: Option<f64>,
    #[arg(long)]
    lambda_rank: Option<f64>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    out_root: Option<PathBuf>,
    /// Fix the run directory name (default: train-<timestamp>-seed<seed>).
    #[arg(long)]
    run_name: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Decode this many modes (extrapolates past the trained K).
    #[arg(long)]
    modes: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Override the checkpoint's decode strategy.
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    #[arg(long, value_enum)]
    rearrange: Option<SwitchArg>,
    #[arg(long, value_enum)]
    causal: Option<SwitchArg>,
    #[arg(long, value_enum)]
    miss_rule: Option<MissRuleArg>,
    /// Worker threads for per-scene evaluation (merge stays deterministic).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out_root: Option<PathBuf>,
    #[arg(long)]
    run_name: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated mode counts, e.g. 1,2,4,6,8,12,16.
    #[arg(long, default_value = "1,2,4,6,8,12,16")]
    k_list: String,
    /// Scenes per (variant, K) cell.
    #[arg(long, default_value_t = 200)]
    scenes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_root: Option<PathBuf>,
    #[arg(long)]
    run_name: Option<String>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories to join (each needs manifest.json + report.json).
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Also write the CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Generate(args) => cmd_generate::run(args, &argv),
        Cmd::Train(args) => cmd_train::run(args, &argv),
        Cmd::Eval(args) => cmd_eval::run(args, &argv),
        Cmd::Bench(args) => cmd_bench::run(args, &argv),
        Cmd::Report(args) => cmd_report::run(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
