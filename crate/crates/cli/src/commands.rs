use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use cfn_core::data::make_synthetic;
use cfn_core::fusion::prediction_strategy_audit;
use cfn_core::gradcheck::run_suite;
use cfn_core::model::{build_cfn_cifar, build_generic_cfn, build_plain_cifar_cnn};
use cfn_core::network::infer;
use cfn_core::run::{build_graph, load_data, run_training, MANIFEST_FILE};
use cfn_core::train::{evaluate, TrainStatus};
use cfn_core::transfer::{
    dump_lc_weights, extract_fused_features, knn_retrieve, linear_probe, mean_ap, ns_score, write_top_maps,
    ProbeConfig,
};
use cfn_core::{Checkpoint, Dataset, Distance, FeatureMatrix, FusionKind, GraphSpec, ModelParams, RunConfig};

use crate::{Command, RunArgs};

#[derive(Debug)]
pub enum CliError {
    /// Bad input: exit code 1.
    Validation(String),
    /// Failure while executing: exit code 2.
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<cfn_core::Error> for CliError {
    fn from(e: cfn_core::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn resolve(run: &RunArgs) -> Result<RunConfig> {
    let text = match &run.config {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut overrides = Vec::new();
    if run.full_schedule {
        overrides.push(("schedule".to_string(), "full".to_string()));
    }
    if let Some(s) = run.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    if let Some(f) = &run.fusion {
        overrides.push(("fusion".into(), f.clone()));
    }
    if let Some(p) = &run.data_path {
        overrides.push(("data_path".into(), p.display().to_string()));
    }
    for kv in &run.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(RunConfig::from_text(&text, &overrides)?)
}

/// Records the command, its arguments and (if any) the resolved config.
fn write_manifest(out: &Path, command: &str, args: &[(&str, String)], cfg: Option<&RunConfig>) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut s = format!("# command: {command}\n");
    for (k, v) in args {
        let _ = writeln!(s, "# {k}: {v}");
    }
    if let Some(cfg) = cfg {
        s.push_str(&cfg.to_manifest());
    }
    fs::write(out.join(MANIFEST_FILE), s)?;
    Ok(())
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<(GraphSpec, ModelParams<f32>, Dataset, Option<Dataset>)> {
    let (data, eval) = load_data(cfg)?;
    let graph = build_graph(cfg, data.image_shape().0)?;
    let params = ModelParams::from_checkpoint(&Checkpoint::load(checkpoint)?);
    params.check_against(&graph)?;
    Ok((graph, params, data, eval))
}

fn load_features(path: &Path) -> Result<FeatureMatrix> {
    if path.extension().is_some_and(|e| e == "csv") {
        Ok(FeatureMatrix::from_csv(&fs::read_to_string(path)?)?)
    } else {
        Ok(FeatureMatrix::from_checkpoint(&Checkpoint::load(path)?)?)
    }
}

fn parse_fusion(s: &str) -> Result<FusionKind> {
    Ok(s.parse()?)
}

/// `1286698` → `1,286,698`.
fn grouped(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { run, out } => train(&run, &out),
        Command::Eval { run, checkpoint, out } => eval(&run, &checkpoint, &out),
        Command::Params {
            model,
            fusion,
            classes,
            config,
            out,
        } => params(&model, fusion.as_deref(), classes, config.as_deref(), out.as_deref()),
        Command::GradCheck { all, seeds, out } => grad_check(all, seeds, out.as_deref()),
        Command::Extract {
            run,
            checkpoint,
            out,
            normalize,
            batch,
        } => extract(&run, &checkpoint, &out, normalize, batch),
        Command::Probe {
            train,
            test,
            out,
            epochs,
            lr,
            seed,
        } => probe(&train, &test, &out, ProbeConfig { epochs, lr, batch: 32, seed }),
        Command::Retrieve {
            db,
            queries,
            out,
            distance,
            no_normalize,
            top,
        } => retrieve(&db, queries.as_deref(), &out, &distance, !no_normalize, top),
        Command::RankMaps {
            run,
            checkpoint,
            out,
            node,
            image,
            top,
        } => rank_maps(&run, &checkpoint, &out, node, image, top),
        Command::LcWeights { run, checkpoint, out } => lc_weights(&run, &checkpoint, &out),
        Command::MakeSynth {
            classes,
            n,
            size,
            seed,
            out,
        } => make_synth(classes, n, size, seed, &out),
    }
}

fn train(run: &RunArgs, out: &Path) -> Result<()> {
    let cfg = resolve(run)?;
    let report = run_training(&cfg, out)?;
    let breakdown = report.graph.param_breakdown()?;
    println!("parameters: {breakdown}");
    if let Some(last) = report.outcome.log.last() {
        println!(
            "iter {}  lr {}  loss {:.6}  top1 error {:.4}",
            last.iter, last.lr, last.loss, last.top1
        );
    }
    println!("manifest:   {}", report.manifest.display());
    println!("log:        {}", report.log.display());
    println!("checkpoint: {}", report.checkpoint.display());
    match report.outcome.status {
        TrainStatus::Completed => Ok(()),
        TrainStatus::Diverged { iter, reason } => Err(CliError::Runtime(format!(
            "training diverged at iteration {iter} ({reason}); last finite parameters saved to {}",
            report.checkpoint.display()
        ))),
    }
}

fn eval(run: &RunArgs, checkpoint: &Path, out: &Path) -> Result<()> {
    let cfg = resolve(run)?;
    write_manifest(out, "eval", &[("checkpoint", checkpoint.display().to_string())], Some(&cfg))?;
    let (graph, params, data, test) = load_model(&cfg, checkpoint)?;
    let mut csv = String::from("split,samples,top1,top5\n");
    let mut sets = vec![("train", &data)];
    if let Some(t) = &test {
        sets.push(("test", t));
    }
    for (name, set) in sets {
        let r = evaluate(&graph, &params, set, 100)?;
        let top5 = r.top5.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(csv, "{name},{},{},{top5}", r.samples, r.top1);
        println!(
            "{name:<5} samples {:>6}  top-1 error {:.4}{}",
            r.samples,
            r.top1,
            r.top5.map(|v| format!("  top-5 error {v:.4}")).unwrap_or_default()
        );
    }
    fs::write(out.join("eval.csv"), csv)?;
    Ok(())
}

fn params(model: &str, fusion: Option<&str>, classes: usize, config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let graph = match model {
        "cifar-plain" => build_plain_cifar_cnn(classes)?,
        "cifar-cfn" => build_cfn_cifar(classes, parse_fusion(fusion.unwrap_or("lc"))?)?,
        "config" => {
            let run = RunArgs {
                config: Some(
                    config
                        .ok_or_else(|| CliError::Validation("--model config needs --config".into()))?
                        .to_path_buf(),
                ),
                set: fusion.map(|f| vec![format!("fusion={f}")]).unwrap_or_default(),
                seed: None,
                fusion: None,
                full_schedule: false,
                data_path: None,
            };
            build_generic_cfn(&resolve(&run)?.model)?
        }
        other => {
            return Err(CliError::Validation(format!(
                "unknown model {other:?}; expected cifar-plain, cifar-cfn or config"
            )))
        }
    };
    let b = graph.param_breakdown()?;
    let fusion_name = graph.fusion.map_or("none".to_string(), |k| k.to_string());
    let mut table = format!("model: {model}  fusion: {fusion_name}  classes: {}\n", graph.classes);
    let _ = writeln!(table, "{:<16}{:>12}", "component", "parameters");
    for (name, n) in [
        ("basic", b.basic),
        ("extra branches", b.extra_branches),
        ("fusion", b.fusion),
        ("total", b.total()),
    ] {
        let _ = writeln!(table, "{name:<16}{:>12}", grouped(n));
    }
    if let Some(kind) = graph.fusion {
        let a = prediction_strategy_audit(graph.k, graph.classes, graph.branch_count(), kind);
        let _ = writeln!(
            table,
            "prediction head (fc + fusion): EFLP {}  EPLF {}  (closed-form formula: EFLP {}  EPLF {})",
            grouped(a.eflp_actual),
            grouped(a.eplf_actual),
            grouped(a.eflp_formula),
            grouped(a.eplf_formula)
        );
    }
    print!("{table}");
    if let Some(out) = out {
        write_manifest(
            out,
            "params",
            &[
                ("model", model.to_string()),
                ("fusion", fusion_name.clone()),
                ("classes", classes.to_string()),
            ],
            None,
        )?;
        let mut csv = String::from("name,group,shape,count\n");
        for p in graph.param_specs()? {
            let shape: Vec<String> = p.shape.iter().map(usize::to_string).collect();
            let _ = writeln!(csv, "{},{:?},{},{}", p.name, p.group, shape.join("x"), p.count());
        }
        let _ = writeln!(csv, "basic,,,{}", b.basic);
        let _ = writeln!(csv, "extra_branches,,,{}", b.extra_branches);
        let _ = writeln!(csv, "fusion,,,{}", b.fusion);
        let _ = writeln!(csv, "total,,,{}", b.total());
        fs::write(out.join("params.csv"), csv)?;
    }
    Ok(())
}

fn grad_check(all: bool, seeds: u64, out: Option<&Path>) -> Result<()> {
    if seeds == 0 {
        return Err(CliError::Validation("--seeds must be at least 1".into()));
    }
    let report = run_suite(seeds, all)?;
    print!("{report}");
    if let Some(out) = out {
        write_manifest(
            out,
            "grad-check",
            &[("all", all.to_string()), ("seeds", seeds.to_string())],
            None,
        )?;
        let mut csv = String::from("op,param,max_rel_err,threshold,passed\n");
        for e in &report.entries {
            let _ = writeln!(csv, "{},{},{:e},{:e},{}", e.op, e.param, e.max_rel_err, e.threshold, e.passed());
        }
        fs::write(out.join("grad_check.csv"), csv)?;
    }
    if report.all_passed() {
        Ok(())
    } else {
        Err(CliError::Runtime("gradient check failed".into()))
    }
}

fn extract(run: &RunArgs, checkpoint: &Path, out: &Path, normalize: bool, batch: usize) -> Result<()> {
    let cfg = resolve(run)?;
    write_manifest(
        out,
        "extract",
        &[
            ("checkpoint", checkpoint.display().to_string()),
            ("normalize", normalize.to_string()),
        ],
        Some(&cfg),
    )?;
    let (graph, params, data, test) = load_model(&cfg, checkpoint)?;
    let mut sets = vec![("train", data)];
    if let Some(t) = test {
        sets.push(("test", t));
    }
    for (name, set) in sets {
        let f = extract_fused_features(&graph, &params, &set, batch, normalize)?;
        fs::write(out.join(format!("features_{name}.csv")), f.to_csv())?;
        f.to_checkpoint()?.save(out.join(format!("features_{name}.ckpt")))?;
        println!("{name}: {} rows of dimension {}", f.len(), f.dim());
    }
    Ok(())
}

fn probe(train: &Path, test: &Path, out: &Path, cfg: ProbeConfig) -> Result<()> {
    write_manifest(
        out,
        "probe",
        &[
            ("train", train.display().to_string()),
            ("test", test.display().to_string()),
            ("epochs", cfg.epochs.to_string()),
            ("lr", cfg.lr.to_string()),
            ("seed", cfg.seed.to_string()),
        ],
        None,
    )?;
    let r = linear_probe(&load_features(train)?, &load_features(test)?, &cfg)?;
    println!("accuracy {:.4}", r.accuracy);
    if !r.missing_classes.is_empty() {
        eprintln!("warning: test classes absent from training set: {:?}", r.missing_classes);
    }
    let missing: Vec<String> = r.missing_classes.iter().map(usize::to_string).collect();
    fs::write(
        out.join("probe.csv"),
        format!("accuracy,missing_classes\n{},{}\n", r.accuracy, missing.join(" ")),
    )?;
    Ok(())
}

fn retrieve(db: &Path, queries: Option<&Path>, out: &Path, distance: &str, normalize: bool, top: usize) -> Result<()> {
    let dist: Distance = distance.parse()?;
    write_manifest(
        out,
        "retrieve",
        &[
            ("db", db.display().to_string()),
            ("queries", queries.unwrap_or(db).display().to_string()),
            ("distance", distance.to_string()),
            ("normalize", normalize.to_string()),
        ],
        None,
    )?;
    let norm = |f: FeatureMatrix| if normalize { f.l2_normalize() } else { f };
    let dbf = norm(load_features(db)?);
    let qf = match queries {
        Some(q) => norm(load_features(q)?),
        None => dbf.clone(),
    };
    let result = knn_retrieve(&dbf, &qf, dist)?;

    let mut ranks = String::from("query,ranked_ids\n");
    for (q, r) in result.rankings.iter().enumerate() {
        let ids: Vec<String> = r.iter().take(top).map(usize::to_string).collect();
        let _ = writeln!(ranks, "{q},{}", ids.join(" "));
    }
    fs::write(out.join("rankings.csv"), ranks)?;

    let relevance: Vec<BTreeSet<usize>> = qf
        .labels
        .iter()
        .map(|&l| (0..dbf.len()).filter(|&i| dbf.labels[i] == l).collect())
        .collect();
    let map = mean_ap(&result, &relevance).ok();
    let ns = ns_score(&result, &dbf.labels, &qf.labels).ok();
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!("mAP {}  N-S {}", show(map), show(ns));
    let csv_val = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    fs::write(
        out.join("metrics.csv"),
        format!("metric,value\nmap,{}\nns,{}\n", csv_val(map), csv_val(ns)),
    )?;
    if map.is_none() && ns.is_none() {
        return Err(CliError::Validation(
            "no query has a relevant database item and groups are not of size 4".into(),
        ));
    }
    Ok(())
}

fn rank_maps(run: &RunArgs, checkpoint: &Path, out: &Path, node: Option<String>, image: usize, top: usize) -> Result<()> {
    let cfg = resolve(run)?;
    let (graph, params, data, _) = load_model(&cfg, checkpoint)?;
    let node = node.unwrap_or_else(|| {
        if graph.node("branch1.relu").is_some() {
            "branch1.relu".into()
        } else {
            graph
                .nodes
                .iter()
                .rev()
                .find(|n| n.name.starts_with("relu"))
                .map(|n| n.name.clone())
                .unwrap_or_default()
        }
    });
    write_manifest(
        out,
        "rank-maps",
        &[
            ("checkpoint", checkpoint.display().to_string()),
            ("node", node.clone()),
            ("image", image.to_string()),
            ("top", top.to_string()),
        ],
        Some(&cfg),
    )?;
    if image >= data.len() {
        return Err(CliError::Validation(format!("image {image} out of range ({} images)", data.len())));
    }
    let (img, _) = data.batch(&[image])?;
    let outs = infer(&graph, &params, &img)?;
    let act = outs
        .get(&node)
        .ok_or_else(|| CliError::Validation(format!("unknown node {node:?}")))?;
    if act.rank() != 4 {
        return Err(CliError::Validation(format!("node {node:?} does not produce feature maps")));
    }
    let s = act.shape();
    let maps = act.reshape(&[s[1], s[2], s[3]])?;
    let (order, paths) = write_top_maps(&maps, top, out)?;
    let mut csv = String::from("rank,channel\n");
    for (r, c) in order.iter().enumerate() {
        let _ = writeln!(csv, "{},{c}", r + 1);
    }
    fs::write(out.join("map_order.csv"), csv)?;
    println!("top channels at {node}: {:?}", &order[..top.min(order.len())]);
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}

fn lc_weights(run: &RunArgs, checkpoint: &Path, out: &Path) -> Result<()> {
    let cfg = resolve(run)?;
    write_manifest(out, "lc-weights", &[("checkpoint", checkpoint.display().to_string())], Some(&cfg))?;
    let graph = build_generic_cfn(&cfg.model)?;
    let params = ModelParams::from_checkpoint(&Checkpoint::load(checkpoint)?);
    params.check_against(&graph)?;
    let w = dump_lc_weights(&graph, &params)?;
    fs::write(out.join("lc_means.csv"), w.means_csv())?;
    fs::write(out.join("lc_matrix.csv"), w.matrix_csv())?;
    print!("{}", w.means_csv());
    println!("sum of means: {}", w.means.iter().sum::<f64>());
    Ok(())
}

fn make_synth(classes: usize, n: usize, size: usize, seed: u64, out: &Path) -> Result<()> {
    write_manifest(
        out,
        "make-synth",
        &[
            ("classes", classes.to_string()),
            ("n", n.to_string()),
            ("size", size.to_string()),
            ("seed", seed.to_string()),
        ],
        None,
    )?;
    let ds = make_synthetic(classes, n, size, seed).map_err(|e| CliError::Validation(e.to_string()))?;
    let path: PathBuf = out.join("dataset.ckpt");
    ds.to_checkpoint()?.save(&path)?;
    println!("{} images of 3x{size}x{size}, {classes} classes -> {}", ds.len(), path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::grouped;

    #[test]
    fn digit_grouping() {
        assert_eq!(grouped(1_286_698), "1,286,698");
        assert_eq!(grouped(74_112), "74,112");
        assert_eq!(grouped(768), "768");
        assert_eq!(grouped(0), "0");
        assert_eq!(grouped(1000), "1,000");
    }
}
