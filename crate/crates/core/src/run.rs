//! End-to-end training runs driven by a [`RunConfig`], writing a manifest,
//! CSV log and checkpoint under one output directory.

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, RunConfig};
use crate::data::{gcn_normalize, load_cifar_dir, load_image_folder, make_synthetic, CifarVariant, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{build_generic_cfn, GraphSpec, ModelParams};
use crate::train::{log_csv, train, TrainOutcome};

pub const MANIFEST_FILE: &str = "manifest.cfg";
pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// Training set and optional held-out evaluation set for `cfg`.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Option<Dataset>)> {
    let classes = cfg.model.classes;
    let (train, eval) = match &cfg.data {
        DataSource::Synthetic { n, size, seed } => (make_synthetic(classes, *n, *size, *seed)?, None),
        DataSource::Cifar10(dir) | DataSource::Cifar100(dir) => {
            let variant = if matches!(cfg.data, DataSource::Cifar10(_)) {
                CifarVariant::Cifar10
            } else {
                CifarVariant::Cifar100
            };
            let normalize = |mut d: Dataset| -> Result<Dataset> {
                d.images = gcn_normalize(&d.images)?;
                Ok(d)
            };
            let train = load_cifar_dir(dir, variant, Split::Train)?.head(cfg.train_subset)?;
            let test = load_cifar_dir(dir, variant, Split::Test)?.head(cfg.eval_subset)?;
            (normalize(train)?, Some(normalize(test)?))
        }
        DataSource::Folder(dir) => (load_image_folder(dir)?.0, None),
        DataSource::Dataset(path) => (Dataset::from_checkpoint(&Checkpoint::load(path)?)?, None),
    };
    if train.classes != classes {
        return Err(Error::InvalidValue {
            key: "C".into(),
            msg: format!("config says {classes} classes but the data has {}", train.classes),
        });
    }
    let train = if matches!(cfg.data, DataSource::Cifar10(_) | DataSource::Cifar100(_)) {
        train
    } else {
        train.head(cfg.train_subset)?
    };
    Ok((train, eval))
}

pub fn build_graph(cfg: &RunConfig, in_channels: usize) -> Result<GraphSpec> {
    let mut model = cfg.model.clone();
    model.in_channels = in_channels;
    build_generic_cfn(&model)
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub graph: GraphSpec,
    pub outcome: TrainOutcome,
    pub manifest: PathBuf,
    pub log: PathBuf,
    pub checkpoint: PathBuf,
}

/// Trains per `cfg` and writes `manifest.cfg`, `train_log.csv` and
/// `model.ckpt` into `out`. The manifest is written before training starts.
/// A diverged run still writes its log and last finite parameters.
pub fn run_training(cfg: &RunConfig, out: &Path) -> Result<RunReport> {
    fs::create_dir_all(out)?;
    let manifest = out.join(MANIFEST_FILE);
    fs::write(&manifest, cfg.to_manifest())?;
    let (data, eval) = load_data(cfg)?;
    let graph = build_graph(cfg, data.image_shape().0)?;
    let params = ModelParams::init(&graph, cfg.train.seed)?;
    let outcome = train(&graph, params, &data, eval.as_ref(), &cfg.train)?;
    let log = out.join(LOG_FILE);
    fs::write(&log, log_csv(&outcome.log))?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    outcome.params.to_checkpoint()?.save(&checkpoint)?;
    Ok(RunReport {
        graph,
        outcome,
        manifest,
        log,
        checkpoint,
    })
}

/// Re-runs the configuration stored in `manifest` into `out`.
pub fn replay(manifest: &Path, out: &Path) -> Result<RunReport> {
    let cfg = RunConfig::from_text(&fs::read_to_string(manifest)?, &[])?;
    run_training(&cfg, out)
}
