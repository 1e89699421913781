//! Flat `key = value` run configuration with `#` comments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::fusion::FusionKind;
use crate::model::{ModelConfig, CIFAR_BRANCH_POINTS, CIFAR_WIDTHS, INIT_SCHEME};
use crate::train::TrainConfig;

/// Every accepted key, in manifest order.
pub const KEYS: &[&str] = &[
    "widths",
    "branch_points",
    "fusion",
    "K",
    "C",
    "seed",
    "schedule",
    "lr",
    "momentum",
    "wd",
    "batch",
    "iters",
    "drops",
    "decay",
    "augment",
    "log_every",
    "data",
    "data_path",
    "train_subset",
    "eval_subset",
    "synth_n",
    "synth_size",
    "synth_seed",
];

/// A parsed entry: value and 1-based source line (0 for overrides).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub value: String,
    pub line: usize,
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// unknown and repeated keys are errors.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, Entry>> {
    let mut out: BTreeMap<String, Entry> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::ConfigSyntax {
            line,
            msg: format!("expected `key = value`, got {content:?}"),
        })?;
        let key = key.trim();
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(Error::ConfigSyntax {
                line,
                msg: format!("invalid key {key:?}"),
            });
        }
        if !KEYS.contains(&key) {
            return Err(Error::UnknownKey(key.to_string()));
        }
        if let Some(prev) = out.get(key) {
            return Err(Error::DuplicateKey {
                key: key.to_string(),
                first: prev.line,
                second: line,
            });
        }
        out.insert(
            key.to_string(),
            Entry {
                value: value.trim().to_string(),
                line,
            },
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    /// `make_synthetic(C, synth_n, synth_size, synth_seed)`.
    Synthetic { n: usize, size: usize, seed: u64 },
    Cifar10(PathBuf),
    Cifar100(PathBuf),
    /// `<dir>/<class>/*.ppm|pgm`.
    Folder(PathBuf),
    /// A dataset exported to the checkpoint container.
    Dataset(PathBuf),
}

/// Fully resolved run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub full_schedule: bool,
    pub data: DataSource,
    pub train_subset: usize,
    pub eval_subset: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::resolve(&BTreeMap::new()).expect("defaults resolve")
    }
}

fn invalid(key: &str, msg: impl Into<String>) -> Error {
    Error::InvalidValue {
        key: key.into(),
        msg: msg.into(),
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| invalid(key, format!("cannot parse {v:?}")))
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(invalid(key, format!("expected true or false, got {v:?}"))),
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Parses a config file and applies `overrides` on top; overrides win.
    pub fn from_text(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = parse_pairs(text)?;
        for (k, v) in overrides {
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::UnknownKey(k.clone()));
            }
            pairs.insert(
                k.clone(),
                Entry {
                    value: v.clone(),
                    line: 0,
                },
            );
        }
        Self::resolve(&pairs)
    }

    pub fn resolve(pairs: &BTreeMap<String, Entry>) -> Result<Self> {
        let get = |k: &str| pairs.get(k).map(|e| e.value.as_str());

        let widths = match get("widths") {
            Some(v) => list("widths", v)?,
            None => CIFAR_WIDTHS.to_vec(),
        };
        let branch_points = match get("branch_points") {
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect(),
            None => CIFAR_BRANCH_POINTS.iter().map(|s| s.to_string()).collect(),
        };
        let fusion: FusionKind = get("fusion").unwrap_or("lc").parse()?;
        let k = get("K").map(|v| num("K", v)).transpose()?;
        let classes = get("C").map(|v| num("C", v)).transpose()?.unwrap_or(10);

        let full_schedule = match get("schedule").unwrap_or("desk") {
            "desk" => false,
            "full" => true,
            other => return Err(invalid("schedule", format!("expected desk or full, got {other:?}"))),
        };
        let iters = get("iters").map(|v| num("iters", v)).transpose()?;
        let mut train = if full_schedule {
            TrainConfig::full()
        } else {
            TrainConfig::desk(iters.unwrap_or(600))
        };
        if let Some(it) = iters {
            train.iters = it;
        }
        if let Some(v) = get("seed") {
            train.seed = num("seed", v)?;
        }
        if let Some(v) = get("lr") {
            train.lr = num("lr", v)?;
        }
        if let Some(v) = get("momentum") {
            train.momentum = num("momentum", v)?;
        }
        if let Some(v) = get("wd") {
            train.wd = num("wd", v)?;
        }
        if let Some(v) = get("batch") {
            train.batch = num("batch", v)?;
        }
        if let Some(v) = get("drops") {
            train.drops = list("drops", v)?;
        }
        if let Some(v) = get("decay") {
            train.decay = num("decay", v)?;
        }
        if let Some(v) = get("augment") {
            train.augment = boolean("augment", v)?;
        }
        if let Some(v) = get("log_every") {
            train.log_every = num("log_every", v)?;
        }
        train.validate()?;

        let path = || -> Result<PathBuf> {
            get("data_path")
                .map(PathBuf::from)
                .ok_or_else(|| invalid("data_path", "required for this data source"))
        };
        let data = match get("data").unwrap_or("synthetic") {
            "synthetic" => DataSource::Synthetic {
                n: get("synth_n").map(|v| num("synth_n", v)).transpose()?.unwrap_or(2000),
                size: get("synth_size").map(|v| num("synth_size", v)).transpose()?.unwrap_or(16),
                seed: get("synth_seed").map(|v| num("synth_seed", v)).transpose()?.unwrap_or(1),
            },
            "cifar10" => DataSource::Cifar10(path()?),
            "cifar100" => DataSource::Cifar100(path()?),
            "folder" => DataSource::Folder(path()?),
            "dataset" => DataSource::Dataset(path()?),
            other => {
                return Err(invalid(
                    "data",
                    format!("expected synthetic, cifar10, cifar100, folder or dataset, got {other:?}"),
                ))
            }
        };
        let cfg = RunConfig {
            model: ModelConfig {
                widths,
                branch_points,
                fusion,
                k,
                classes,
                in_channels: 3,
            },
            train,
            full_schedule,
            data,
            train_subset: get("train_subset").map(|v| num("train_subset", v)).transpose()?.unwrap_or(0),
            eval_subset: get("eval_subset").map(|v| num("eval_subset", v)).transpose()?.unwrap_or(0),
        };
        crate::model::build_generic_cfn(&cfg.model)?;
        Ok(cfg)
    }

    /// The resolved configuration in config-file syntax. Feeding it back
    /// through [`RunConfig::from_text`] yields an equal configuration.
    pub fn to_manifest(&self) -> String {
        let t = &self.train;
        let m = &self.model;
        let mut s = String::new();
        let _ = writeln!(s, "# cfn run manifest");
        let _ = writeln!(s, "# init: {INIT_SCHEME}");
        let _ = writeln!(s, "widths = {}", join(&m.widths));
        let _ = writeln!(s, "branch_points = {}", m.branch_points.join(","));
        let _ = writeln!(s, "fusion = {}", m.fusion);
        let _ = writeln!(s, "K = {}", m.k.unwrap_or(*m.widths.last().unwrap_or(&0)));
        let _ = writeln!(s, "C = {}", m.classes);
        let _ = writeln!(s, "seed = {}", t.seed);
        let _ = writeln!(s, "schedule = {}", if self.full_schedule { "full" } else { "desk" });
        let _ = writeln!(s, "lr = {}", t.lr);
        let _ = writeln!(s, "momentum = {}", t.momentum);
        let _ = writeln!(s, "wd = {}", t.wd);
        let _ = writeln!(s, "batch = {}", t.batch);
        let _ = writeln!(s, "iters = {}", t.iters);
        let _ = writeln!(s, "drops = {}", join(&t.drops));
        let _ = writeln!(s, "decay = {}", t.decay);
        let _ = writeln!(s, "augment = {}", t.augment);
        let _ = writeln!(s, "log_every = {}", t.log_every);
        match &self.data {
            DataSource::Synthetic { n, size, seed } => {
                let _ = writeln!(s, "data = synthetic");
                let _ = writeln!(s, "synth_n = {n}");
                let _ = writeln!(s, "synth_size = {size}");
                let _ = writeln!(s, "synth_seed = {seed}");
            }
            DataSource::Cifar10(p) | DataSource::Cifar100(p) | DataSource::Folder(p) | DataSource::Dataset(p) => {
                let kind = match &self.data {
                    DataSource::Cifar10(_) => "cifar10",
                    DataSource::Cifar100(_) => "cifar100",
                    DataSource::Folder(_) => "folder",
                    _ => "dataset",
                };
                let _ = writeln!(s, "data = {kind}");
                let _ = writeln!(s, "data_path = {}", p.display());
            }
        }
        let _ = writeln!(s, "train_subset = {}", self.train_subset);
        let _ = writeln!(s, "eval_subset = {}", self.eval_subset);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_text("", &[]).unwrap();
        assert_eq!(c.model.widths, CIFAR_WIDTHS.to_vec());
        assert_eq!(c.model.fusion, FusionKind::Lc);
        assert_eq!(c.train.lr, 0.05);
        assert_eq!(c.train.drops, vec![400]);
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn overrides_win() {
        let c = RunConfig::from_text("lr = 0.1\n", &[("lr".into(), "0.05".into())]).unwrap();
        assert_eq!(c.train.lr, 0.05);
        let c = RunConfig::from_text("lr = 0.1 # comment\n\n# only a comment\n", &[]).unwrap();
        assert_eq!(c.train.lr, 0.1);
    }

    #[test]
    fn duplicate_names_both_lines() {
        let err = RunConfig::from_text("lr = 0.1\nseed = 3\nlr = 0.2\n", &[]).unwrap_err();
        assert!(matches!(err, Error::DuplicateKey { first: 1, second: 3, .. }), "{err}");
        assert!(err.to_string().contains("lines 1 and 3"));
    }

    #[test]
    fn syntax_and_unknown_keys() {
        let err = RunConfig::from_text("seed = 1\nnonsense line\n", &[]).unwrap_err();
        assert!(matches!(err, Error::ConfigSyntax { line: 2, .. }));
        assert!(matches!(RunConfig::from_text("colour = red\n", &[]).unwrap_err(), Error::UnknownKey(_)));
        assert!(RunConfig::from_text("", &[("bogus".into(), "1".into())]).is_err());
        let e = RunConfig::from_text("lr = fast\n", &[]).unwrap_err();
        assert!(e.is_validation(), "{e}");
        assert!(RunConfig::from_text("branch_points = conv3\n", &[]).unwrap_err().is_validation());
        assert!(RunConfig::from_text("drops = 5,3\n", &[]).is_err());
        assert!(RunConfig::from_text("data = cifar10\n", &[]).is_err());
    }

    #[test]
    fn full_schedule_preset() {
        let c = RunConfig::from_text("schedule = full\n", &[]).unwrap();
        assert_eq!(c.train, TrainConfig::full());
        let c = RunConfig::from_text("schedule = full\niters = 10\ndrops = 5\n", &[]).unwrap();
        assert_eq!((c.train.lr, c.train.iters, c.train.drops.clone()), (0.1, 10, vec![5]));
    }

    #[test]
    fn manifest_round_trip() {
        let text = "widths = 8,8,8\nbranch_points = pool1\nfusion = sum\nC = 3\nseed = 9\niters = 30\ndata = folder\ndata_path = /tmp/x\naugment = true\n";
        let c = RunConfig::from_text(text, &[]).unwrap();
        let m = c.to_manifest();
        let back = RunConfig::from_text(&m, &[]).unwrap();
        assert_eq!(back.to_manifest(), m);
        assert_eq!(back.train, c.train);
        assert_eq!(back.data, c.data);
        assert_eq!(back.model.k, Some(8));
        let plain = RunConfig::from_text("branch_points =\nwidths = 4,4,4\n", &[]).unwrap();
        assert!(plain.model.branch_points.is_empty());
        assert_eq!(RunConfig::from_text(&plain.to_manifest(), &[]).unwrap().model.branch_points.len(), 0);
    }
}
