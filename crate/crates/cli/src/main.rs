mod commands;
mod config;
mod plot;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use fpd_core::{HourglassConfig, Protocol};

use config::{parse_arch, resolve, FileConfig, Overrides};

#[derive(Debug, Parser)]
#[command(name = "fpd", version, about = "Train, distill and evaluate stacked-hourglass pose networks")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

/// Shared options. Each falls back to an `FPD_*` environment variable, then
/// to the config file.
#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true, env = "FPD_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true, env = "FPD_SEED")]
    seed: Option<u64>,
    /// Weight of the distillation term.
    #[arg(long, global = true, env = "FPD_ALPHA")]
    alpha: Option<f64>,
    #[arg(long, global = true, env = "FPD_STAGES")]
    stages: Option<usize>,
    #[arg(long, global = true, env = "FPD_CHANNELS")]
    channels: Option<usize>,
    #[arg(long, global = true, env = "FPD_TEACHER_CKPT")]
    teacher_ckpt: Option<PathBuf>,
    /// pckh05 (head-normalized, 0.5) or pck02 (torso-normalized, 0.2).
    #[arg(long, global = true, env = "FPD_PROTOCOL", value_parser = parse_protocol)]
    protocol: Option<Protocol>,
    #[arg(long, global = true, env = "FPD_OUT_DIR")]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true, env = "FPD_EPOCHS")]
    epochs: Option<usize>,
    #[arg(long, global = true, env = "FPD_MAX_STEPS")]
    max_steps: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the large network on ground truth.
    TrainTeacher,
    /// Train a compact network against ground truth and a frozen teacher.
    Distill {
        /// Comma-separated alphas; one student per value.
        #[arg(long, value_delimiter = ',')]
        alpha_sweep: Option<Vec<f64>>,
    },
    /// Score a checkpoint on the validation split.
    Eval {
        #[arg(long, env = "FPD_CHECKPOINT")]
        checkpoint: Option<PathBuf>,
    },
    /// Parameter and FLOP counts for a grid of architectures.
    ArchReport {
        /// Comma-separated STAGESxCHANNELS pairs; empty prints the header only.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<String>>,
    },
    /// Render curve files or JSONL training logs to PNG.
    PlotCurves { inputs: Vec<PathBuf> },
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    s.parse().map_err(|e: fpd_core::FpdError| e.to_string())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let g = cli.global;
    let file = match &g.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let mut over = Overrides {
        seed: g.seed,
        alpha: g.alpha,
        stages: g.stages,
        channels: g.channels,
        teacher_ckpt: g.teacher_ckpt,
        checkpoint: None,
        protocol: g.protocol,
        out_dir: g.out_dir,
        epochs: g.epochs,
        max_steps: g.max_steps,
        alpha_sweep: None,
        arch_grid: None,
    };
    match cli.command {
        Command::TrainTeacher => {
            let run = resolve("train-teacher", HourglassConfig::teacher(), file, &over)?;
            commands::train_teacher(&run)
        }
        Command::Distill { alpha_sweep } => {
            over.alpha_sweep = alpha_sweep;
            let path = over.teacher_ckpt.clone().or(file.teacher_ckpt.clone());
            let teacher = commands::load_teacher(path.as_deref())?;
            let preset = HourglassConfig::student()
                .with_input_size(teacher.network.input_size)
                .with_joints(teacher.network.num_joints);
            let run = resolve("distill", preset, file, &over)?;
            commands::distill(&run, &teacher)
        }
        Command::Eval { checkpoint } => {
            over.checkpoint = checkpoint;
            let path = over.checkpoint.clone().or(file.checkpoint.clone());
            let ck = commands::load_student(path.as_deref())?;
            let mut run = resolve("eval", ck.network, file, &over)?;
            if run.network != ck.network {
                log::warn!("evaluating the checkpoint's own architecture; network overrides ignored");
                run.network = ck.network;
            }
            commands::eval(&run, &ck)
        }
        Command::ArchReport { grid } => {
            over.arch_grid = grid
                .map(|g| g.iter().filter(|s| !s.trim().is_empty()).map(|s| parse_arch(s)).collect())
                .transpose()?;
            let run = resolve("arch-report", HourglassConfig::teacher(), file, &over)?;
            commands::arch_report(&run)
        }
        Command::PlotCurves { inputs } => {
            let run = resolve("plot-curves", HourglassConfig::student(), file, &over)?;
            commands::plot_curves(&run, &inputs)
        }
    }
}
