//! `hydroseg`: one binary for the whole pipeline, from synthetic scenes to the
//! transfer report and channel analysis.

mod commands;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "hydroseg", version, about = "Two-stage transfer-learning water segmentation on synthetic imagery")]
pub struct Cli {
    /// TOML run config overlaid on the defaults (`.json` snapshots also load).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (a checkpoint path for `train`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for evaluation and independent arms.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum DomainArg {
    Source,
    Target,
    Both,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Pretrain,
    Finetune,
    Scratch,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Segformer,
    Unet,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    All,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate scene/mask PNG pairs and a generation manifest.
    Synth {
        #[arg(long, value_enum, default_value = "both")]
        domain: DomainArg,
        /// Scenes per domain; defaults to the config's counts.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Cut scenes into water-bearing patches and split them 9:1.
    Tile {
        /// Directory of `<name>.png` + `<name>_mask.png` pairs.
        #[arg(long)]
        input: PathBuf,
    },
    /// Write augmented variants of one patch for inspection.
    Augment {
        /// Patch image; its mask is the sibling `<stem>_mask.png`.
        #[arg(long)]
        patch: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Train one model on a tiled patch directory.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Patch directory written by `tile`.
        #[arg(long)]
        data: PathBuf,
        /// Initial checkpoint; required for fine-tuning.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Architecture for a fresh model (default segformer).
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
    },
    /// Score a checkpoint on a tiled patch directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitArg,
    },
    /// Channel skeleton, binning and concentration statistics of a mask.
    Analyze {
        #[arg(long)]
        mask: PathBuf,
    },
    /// Render an experiment's metrics JSON as markdown tables.
    Report {
        /// `metrics.json` or the experiment directory holding it.
        #[arg(long)]
        input: PathBuf,
    },
    /// Run the full four-arm transfer experiment end to end.
    Experiment,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            let message = e.kind().as_str().unwrap_or("invalid arguments");
            return commands::fail(commands::ErrorKind::Usage, message);
        }
    };
    let level = if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = commands::classify(&e);
            commands::fail(kind, &format!("{e:#}"))
        }
    }
}
