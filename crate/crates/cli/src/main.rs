use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Convolutional fusion networks: training, auditing and transfer evaluation.
#[derive(Debug, Parser)]
#[command(name = "cfn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus the flags that override its keys.
#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Flat `key = value` config file; a run manifest works too.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set lr=0.01` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// sum, conv or lc.
    #[arg(long)]
    fusion: Option<String>,
    /// Use the full CIFAR protocol (lr 0.1, drop at 100k, stop at 120k, momentum 0.9).
    #[arg(long)]
    full_schedule: bool,
    #[arg(long)]
    data_path: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a network and write manifest, log and checkpoint.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-1/top-5 error of a checkpoint.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter breakdown of a model.
    Params {
        /// cifar-plain, cifar-cfn, or config (read from --config).
        #[arg(long, default_value = "cifar-cfn")]
        model: String,
        #[arg(long)]
        fusion: Option<String>,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write params.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every layer op.
    GradCheck {
        /// Include whole-graph checks of the three fusion variants.
        #[arg(long)]
        all: bool,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fused features of every image, as CSV and checkpoint.
    Extract {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// L2-normalise each feature row.
        #[arg(long)]
        normalize: bool,
        #[arg(long, default_value_t = 100)]
        batch: usize,
    },
    /// Linear softmax probe on frozen features.
    Probe {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// KNN retrieval with N-S score and mAP; labels act as group ids.
    Retrieve {
        #[arg(long)]
        db: PathBuf,
        /// Defaults to the database itself.
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// euclidean or cosine.
        #[arg(long, default_value = "cosine")]
        distance: String,
        /// Skip the default L2 normalisation of features.
        #[arg(long)]
        no_normalize: bool,
        /// Ranked ids written per query.
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Rank one image's feature maps at a node and write the top maps as PGM.
    RankMaps {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Node whose output is ranked; defaults to the first side-branch ReLU.
        #[arg(long)]
        node: Option<String>,
        #[arg(long, default_value_t = 0)]
        image: usize,
        #[arg(long, default_value_t = 4)]
        top: usize,
    },
    /// Per-branch mean LC fusion weights and the full weight matrix.
    LcWeights {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic grating dataset as a checkpoint file.
    MakeSynth {
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
