//! `egfs-loc`: dataset generation, training, localization, evaluation and
//! exports for the error-guided scene coordinate regression pipeline.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;

use commands::Split;
use config::{Overrides, RunConfig};

/// Bad invocation or configuration; exits with status 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Sampling mode: random, egfs or quantile:<q>.
    #[arg(long, global = true)]
    pub mode: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    /// Checkpoint file (default `<out>/checkpoint.bin`).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Region expander: grow, grow:<tol>, oracle or file:<dir>.
    #[arg(long, global = true)]
    pub expander: Option<String>,
    /// Prompt percentage.
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    /// Total training epochs.
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Train without the confidence head.
    #[arg(long, global = true)]
    pub no_confidence: bool,
    /// Skip confidence filtering before RANSAC.
    #[arg(long, global = true)]
    pub no_filter: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset into `--out`.
    GenData,
    /// Train a regressor on the dataset's training frames.
    Train {
        /// Train once per value of `tau_sweep` and compare.
        #[arg(long)]
        tau_sweep: bool,
    },
    /// Estimate poses for a split.
    Localize {
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Compare a poses file against ground truth.
    Eval {
        /// Poses CSV (default `<out>/poses.csv`).
        #[arg(long)]
        poses: Option<PathBuf>,
    },
    /// Per-region reprojection error and inlier ratios.
    Analyze {
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Write predicted scene coordinates as a PLY point cloud.
    ExportCloud {
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
        /// Keep above-median-confidence points inside the masks.
        #[arg(long)]
        filter: bool,
        /// Directory of per-frame PBM masks, e.g. `<out>/masks/iter4`.
        #[arg(long)]
        masks: Option<PathBuf>,
    },
}

#[derive(Debug, Parser)]
#[command(name = "egfs-loc", version, about = "Scene coordinate regression with error-guided feature selection")]
struct Full {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

pub fn run(args: impl IntoIterator<Item = String>) -> anyhow::Result<()> {
    let full = match Full::try_parse_from(args) {
        Ok(f) => f,
        Err(e) if e.use_stderr() => return Err(UsageError(e.render().to_string()).into()),
        Err(e) => {
            print!("{}", e.render());
            return Ok(());
        }
    };
    let c = full.common;
    let base = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let overrides = Overrides {
        seed: c.seed,
        dataset: c.dataset,
        out: c.out,
        checkpoint: c.checkpoint,
        mode: c.mode,
        expander: c.expander,
        tau: c.tau,
        epochs: c.epochs,
        no_confidence: c.no_confidence,
        no_filter: c.no_filter,
    };
    let r = base.apply(&overrides).resolve()?;
    match full.command {
        Command::GenData => commands::gen_data(&r),
        Command::Train { tau_sweep } => commands::train(&r, tau_sweep),
        Command::Localize { split } => commands::localize(&r, split),
        Command::Eval { poses } => commands::evaluate(&r, poses.as_deref()).map(|_| ()),
        Command::Analyze { split } => commands::analyze(&r, split),
        Command::ExportCloud { split, filter, masks } => commands::export_cloud(&r, split, filter, masks.as_deref()).map(|_| ()),
    }
}

/// Maps an error to the process exit status.
pub fn exit_code(err: &anyhow::Error) -> ExitCode {
    if err.chain().any(|e| e.is::<UsageError>()) {
        ExitCode::from(EXIT_USAGE)
    } else {
        ExitCode::from(EXIT_RUNTIME)
    }
}
