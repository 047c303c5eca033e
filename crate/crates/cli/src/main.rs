use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fsd_core::bench::CountingAlloc;
use fsd_core::FsdError;

mod commands;
mod guard;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

/// Sparse LiDAR detector: data generation, training, evaluation, benchmarks.
#[derive(Parser)]
#[command(name = "fsd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct ConfigArgs {
    /// TOML file layered over the built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `section.key=value` override, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PipelineArg {
    Fsd,
    Dense,
}

#[derive(Subcommand)]
enum Command {
    /// Write train and val scene files.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Shorthand for `--set seed=N`.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; defaults to `paths.data_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace existing train/val splits in the output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model on the train split.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "fsd")]
        pipeline: PipelineArg,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory; defaults to `<paths.out_dir>/<pipeline>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint with its own configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a split and write the report.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
        /// Report path; the PR curves go next to it as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure latency and memory of both pipelines across ranges.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        fsd_checkpoint: Option<PathBuf>,
        #[arg(long)]
        dense_checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump one scene's grouping, proposals and detections as JSON.
    Inspect {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<FsdError>()) {
        Some(FsdError::Config(_) | FsdError::Capacity(_)) => 2,
        Some(FsdError::Format { .. } | FsdError::Io { .. }) => 3,
        Some(FsdError::NonFinite { .. }) => 4,
        Some(FsdError::Contract(_)) | None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { cfg, seed, out, force } => commands::gen_data(&cfg, seed, out, force),
        Command::Train {
            cfg,
            pipeline,
            data,
            out,
            resume,
        } => commands::train(&cfg, pipeline, data, out, resume),
        Command::Eval {
            cfg,
            checkpoint,
            data,
            split,
            out,
        } => commands::eval(&cfg, &checkpoint, data, &split, out),
        Command::Bench {
            cfg,
            fsd_checkpoint,
            dense_checkpoint,
            out,
        } => commands::bench(&cfg, fsd_checkpoint, dense_checkpoint, out),
        Command::Inspect {
            cfg,
            scene,
            checkpoint,
            out,
        } => commands::inspect(&cfg, &scene, checkpoint, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
