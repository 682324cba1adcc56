use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Joint synthesis of nuclei images, distance maps and label maps.
#[derive(Debug, Parser)]
#[command(name = "cosynth", version)]
struct Cli {
    /// Directory that relative dataset paths resolve against.
    #[arg(long, global = true, env = "COSYNTH_DATA_ROOT")]
    data_root: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (TOML). Defaults apply to anything left out.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a procedural dataset with train/test splits.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output directory (defaults to the configured dataset path).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the joint denoiser on a dataset's train split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Run directory for checkpoints, loss log and run manifest.
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory (defaults to the configured dataset path).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint directory to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample triplets conditioned on the point maps and prompts of a dataset.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset whose samples provide the conditions.
        #[arg(long)]
        conditions: PathBuf,
        /// Which split of the conditions dataset to use.
        #[arg(long, default_value = "test")]
        split: String,
        /// Guidance scale (1 = conditional only).
        #[arg(long)]
        omega: Option<f64>,
        /// Use at most this many conditions.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split the foreground of stored samples into instances.
    Separate {
        /// Dataset directory with distance maps, labels and point maps.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare predictions with ground truth and write a metrics report.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Comma-separated subset of dice,mdice,aji,detection,fsd,fid,is.
        #[arg(long, default_value = "dice,mdice,aji,detection,fsd")]
        metrics: String,
        /// Report directory (defaults to the prediction directory).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print the prompt for a tissue and its cell types.
    Prompt {
        #[arg(long)]
        tissue: String,
        /// Comma-separated cell type names.
        #[arg(long)]
        cells: String,
        #[arg(long)]
        stain: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
