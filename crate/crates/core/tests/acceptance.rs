//! One PASS/FAIL line per acceptance criterion, written straight to stderr so
//! it shows up even when output capture is on.
//!
//!     cargo test -p cfn-core --test acceptance -- --nocapture

use std::collections::BTreeSet;
use std::io::Write;
use std::time::{Duration, Instant};

use cfn_core::fusion::{fuse_conv, fuse_lc, fuse_sum, init_lc, BranchStack, FusionParams};
use cfn_core::gradcheck::{self, GRAPH_THRESHOLD, OP_THRESHOLD};
use cfn_core::model::{build_cfn_cifar, build_generic_cfn, build_plain_cifar_cnn, NodeKind};
use cfn_core::network::{backward_with, forward};
use cfn_core::run::{replay, run_training};
use cfn_core::train::{self, TrainStatus};
use cfn_core::transfer::{knn_retrieve, mean_ap, ns_score};
use cfn_core::{
    BackwardOptions, Checkpoint, Distance, FeatureMatrix, Fill, FusionKind, GraphSpec, ModelConfig, ModelParams,
    RunConfig, Tensor, TrainConfig,
};

fn report(id: &str, name: &str, ok: bool, detail: &str) {
    let line = format!("{} {id:>2} {name}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "criterion {id} ({name}) failed: {detail}");
}

fn skip(id: &str, name: &str, why: &str) {
    let line = format!("SKIP {id:>2} {name}: {why}\n");
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::create(shape, Fill::Uniform { seed, lo, hi }).unwrap()
}

fn secs(d: Duration) -> String {
    format!("{:.2} s", d.as_secs_f64())
}

#[test]
fn c1_parameter_reconciliation() {
    let t = Instant::now();
    let mut problems = Vec::new();
    let plain = build_plain_cifar_cnn(10).unwrap().param_breakdown().unwrap();
    if (plain.basic, plain.extra_branches, plain.fusion) != (1_286_698, 0, 0) {
        problems.push(format!("plain {plain}"));
    }
    let mut fusion = Vec::new();
    for (kind, want) in [(FusionKind::Sum, 0), (FusionKind::Conv, 4), (FusionKind::Lc, 768)] {
        let b = build_cfn_cifar(10, kind).unwrap().param_breakdown().unwrap();
        if (b.basic, b.extra_branches, b.fusion) != (1_286_698, 74_112, want) {
            problems.push(format!("{kind}: {b}"));
        }
        fusion.push(b.fusion.to_string());
    }
    let took = t.elapsed();
    if took >= Duration::from_secs(1) {
        problems.push(format!("took {}", secs(took)));
    }
    let detail = if problems.is_empty() {
        format!(
            "basic 1286698, extra 74112, fusion {} in {}",
            fusion.join("/"),
            secs(took)
        )
    } else {
        problems.join("; ")
    };
    report("1", "parameter reconciliation", problems.is_empty(), &detail);
}

#[test]
fn c2_gradient_oracle() {
    let t = Instant::now();
    let suite = gradcheck::run_suite(20, true).unwrap();
    let took = t.elapsed();
    let mut worst: Vec<(String, f64, f64)> = Vec::new();
    for e in &suite.entries {
        match worst.iter_mut().find(|w| w.0 == e.op) {
            Some(w) => w.1 = w.1.max(e.max_rel_err),
            None => worst.push((e.op.clone(), e.max_rel_err, e.threshold)),
        }
    }
    let ops = [
        "fc", "gap", "relu", "conv1x1", "conv3x3", "maxpool", "softmax_ce", "stack", "fuse_sum", "fuse_conv",
        "fuse_lc", "cfn[sum]", "cfn[conv]", "cfn[lc]",
    ];
    let covered = ops.iter().all(|op| worst.iter().any(|w| w.0 == *op));
    let thresholds_pinned = worst.iter().all(|(op, _, th)| {
        *th == if op.starts_with("cfn[") { GRAPH_THRESHOLD } else { OP_THRESHOLD }
    }) && OP_THRESHOLD == 1e-6
        && GRAPH_THRESHOLD == 1e-5;
    let ok = suite.all_passed() && covered && thresholds_pinned && took < Duration::from_secs(300);
    let errs: Vec<String> = worst.iter().map(|(op, e, _)| format!("{op} {e:.1e}")).collect();
    report(
        "2",
        "gradient oracle (20 seeds)",
        ok,
        &format!("{} in {}", errs.join(", "), secs(took)),
    );
}

fn random_stack(n: usize, k: usize, s: usize, seed: u64, lo: f64) -> BranchStack<f64> {
    BranchStack::from_tensor(uniform(&[n, k, s], seed, lo, 2.0)).unwrap()
}

#[test]
fn c3_fusion_equivalences() {
    let mut sum_conv = true;
    let mut tied = true;
    let mut init_err = 0.0f64;
    for seed in 0..50 {
        let (n, k, s) = (1 + seed as usize % 4, 1 + seed as usize % 7, 1 + seed as usize % 5);
        let g = random_stack(n, k, s, seed, -2.0);
        let (sum, _) = fuse_sum(&g).unwrap();
        let ones = Tensor::from_vec(&[s], vec![1.0; s]).unwrap();
        let (conv, _) = fuse_conv(&g, &ones, 0.0).unwrap();
        sum_conv &= conv.data() == sum.data();

        let w = uniform(&[s], seed + 1000, -1.5, 1.5);
        let b = uniform(&[1], seed + 2000, -1.0, 1.0).data()[0];
        let (conv, _) = fuse_conv(&g, &w, b).unwrap();
        let rows: Vec<f64> = (0..k).flat_map(|_| w.data().iter().copied()).collect();
        let (lc, _) = fuse_lc(&g, &Tensor::from_vec(&[k, s], rows).unwrap(), &Tensor::from_vec(&[k], vec![b; k]).unwrap())
            .unwrap();
        tied &= lc.data() == conv.data();

        let nonneg = random_stack(n, k, s, seed + 3000, 0.0);
        let FusionParams::Lc { weights, bias } = init_lc::<f64>(k, s).unwrap() else { unreachable!() };
        let (lc, _) = fuse_lc(&nonneg, &weights, &bias).unwrap();
        let (sum, _) = fuse_sum(&nonneg).unwrap();
        init_err = init_err.max(lc.max_abs_diff(&sum.scale(1.0 / s as f64)));
    }
    report(
        "3",
        "fusion equivalences",
        sum_conv && tied && init_err <= 1e-12,
        &format!(
            "conv(1,0)==sum bitwise {sum_conv}, tied lc==conv bitwise {tied}, init lc vs sum/S max err {init_err:.1e}"
        ),
    );
}

fn nudged_params(graph: &GraphSpec, seed: u64) -> ModelParams<f64> {
    let mut params = ModelParams::<f64>::init(graph, seed).unwrap();
    for name in ["fuse.weight", "fuse.bias"] {
        if let Some(t) = params.get(name) {
            let nudged = t.add(&uniform(t.shape(), seed + 50, -0.2, 0.2)).unwrap();
            params.insert(name, nudged);
        }
    }
    params
}

#[test]
fn c4_gradient_routing() {
    let opts = |blocked: Vec<(String, String)>| BackwardOptions {
        blocked_edges: blocked,
        keep_activation_grads: true,
    };
    let mut worst = 0.0f64;
    let mut points = 0;
    let mut killed = true;
    let mut others_alive = true;
    for kind in FusionKind::ALL {
        let graph = gradcheck::small_cfn(kind).unwrap();
        for seed in 0..10 {
            let params = nudged_params(&graph, seed);
            let input = uniform(&[4, 3, 8, 8], seed + 7, -1.0, 1.0);
            let labels = [0, 1, 2, 1];
            let (_, tape) = forward(&graph, &params, &input, &labels).unwrap();
            let joint = backward_with(&graph, &tape, &opts(vec![])).unwrap();
            for point in &graph.branch_points {
                let consumers: Vec<String> = graph
                    .nodes
                    .iter()
                    .filter(|n| n.inputs.contains(point))
                    .map(|n| n.name.clone())
                    .collect();
                assert_eq!(consumers.len(), 2, "{point} should feed the main path and one branch");
                let mut total: Option<Tensor<f64>> = None;
                for keep in &consumers {
                    let blocked = consumers
                        .iter()
                        .filter(|c| *c != keep)
                        .map(|c| (c.clone(), point.clone()))
                        .collect();
                    let g = backward_with(&graph, &tape, &opts(blocked)).unwrap();
                    let part = g.activations[point].clone();
                    total = Some(match total {
                        Some(t) => t.add(&part).unwrap(),
                        None => part,
                    });
                }
                worst = worst.max(total.unwrap().max_abs_diff(&joint.activations[point]));
                points += 1;
            }

            if kind != FusionKind::Lc {
                continue;
            }
            let s = graph.branch_count();
            for j in 0..s - 1 {
                let mut p = params.clone();
                let w = p.require("fuse.weight").unwrap();
                let mut data = w.data().to_vec();
                for row in 0..graph.k {
                    data[row * s + j] = 0.0;
                }
                p.insert("fuse.weight", Tensor::from_vec(w.shape(), data).unwrap());
                let (_, tape) = forward(&graph, &p, &input, &labels).unwrap();
                let g = backward_with(&graph, &tape, &BackwardOptions::default()).unwrap();
                for b in 1..s {
                    for suffix in ["weight", "bias"] {
                        let name = format!("branch{b}.conv.{suffix}");
                        let zero = g.params[&name].data().iter().all(|&v| v == 0.0);
                        if b == j + 1 {
                            killed &= zero;
                        } else {
                            others_alive &= !zero;
                        }
                    }
                }
            }
        }
    }
    report(
        "4",
        "gradient routing at branch points",
        worst <= 1e-12 && killed && others_alive && points > 0,
        &format!(
            "{points} branch inputs, max |sum of paths - joint| {worst:.1e}; zeroed LC column kills its branch {killed}, other branches still learn {others_alive}"
        ),
    );
}

fn toy_model(branches: &[&str]) -> ModelConfig {
    ModelConfig {
        widths: vec![8; 7],
        branch_points: branches.iter().map(|s| s.to_string()).collect(),
        fusion: FusionKind::Lc,
        k: None,
        classes: 3,
        in_channels: 3,
    }
}

#[test]
fn c5_toy_convergence() {
    let t = Instant::now();
    let data = cfn_core::data::make_synthetic(3, 2000, 16, 1).unwrap();
    let epochs = 30;
    let cfg = TrainConfig {
        seed: 1,
        ..TrainConfig::desk(epochs * data.len() / 100)
    };
    let run = |model: &ModelConfig| {
        let graph = build_generic_cfn(model).unwrap();
        let params = ModelParams::init(&graph, cfg.seed).unwrap();
        train::train(&graph, params, &data, None, &cfg).unwrap()
    };
    let best = |o: &train::TrainOutcome| o.log.iter().map(|r| 1.0 - r.top1).fold(0.0, f64::max);

    let plain = run(&toy_model(&[]));
    let cfn = run(&toy_model(&["pool2", "pool3"]));
    let again = run(&toy_model(&["pool2", "pool3"]));
    let took = t.elapsed();

    let completed = plain.status == TrainStatus::Completed && cfn.status == TrainStatus::Completed;
    let (pa, ca) = (best(&plain), best(&cfn));
    let same = cfn.losses.iter().map(|l| l.to_bits()).eq(again.losses.iter().map(|l| l.to_bits()))
        && cfn.final_loss().is_some();
    report(
        "5",
        "toy convergence",
        completed && pa >= 0.98 && ca >= 0.98 && same && took < Duration::from_secs(600),
        &format!(
            "best train accuracy plain {:.2}%, cfn {:.2}% over {epochs} epochs; rerun bitwise {same} in {}",
            100.0 * pa,
            100.0 * ca,
            secs(took)
        ),
    );
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn c6_cifar_sanity() {
    let Some(dir) = std::env::var_os("CFN_CIFAR10_DIR") else {
        skip("6", "desk-scale CIFAR-10", "set CFN_CIFAR10_DIR to a cifar-10-batches-bin directory to run");
        return;
    };
    let out = tempfile::tempdir().unwrap();
    let mut errors = [Vec::new(), Vec::new()];
    for seed in 1..=3u64 {
        for (i, branches) in ["", "pool2,pool3"].into_iter().enumerate() {
            let text = format!(
                "widths = 16,16,32,32,32,32,32\nbranch_points = {branches}\nfusion = lc\nC = 10\nseed = {seed}\n\
                 data = cifar10\ndata_path = {}\ntrain_subset = 5000\neval_subset = 1000\n\
                 iters = 1500\ndrops = 1000\n",
                dir.to_string_lossy()
            );
            let cfg = RunConfig::from_text(&text, &[]).unwrap();
            let r = run_training(&cfg, &out.path().join(format!("s{seed}_{i}"))).unwrap();
            errors[i].push(100.0 * r.outcome.log.last().unwrap().top1);
        }
    }
    let (p, c) = (median(errors[0].clone()), median(errors[1].clone()));
    report(
        "6",
        "desk-scale CIFAR-10",
        c <= p + 1.0,
        &format!("median test error plain {p:.2}%, cfn {c:.2}% (runs {:?} / {:?})", errors[0], errors[1]),
    );
}

fn grouped_features(groups: usize, copies: usize, noise: f64, seed: u64) -> FeatureMatrix {
    let dim = 16;
    let centers = uniform(&[groups, dim], seed, -1.0, 1.0);
    let jitter = uniform(&[groups * copies, dim], seed + 1, -noise, noise);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..groups * copies {
        let g = i % groups;
        for d in 0..dim {
            rows.push((centers.data()[g * dim + d] + jitter.data()[i * dim + d]) as f32);
        }
        labels.push(g);
    }
    FeatureMatrix::new(Tensor::from_vec(&[groups * copies, dim], rows).unwrap(), labels).unwrap()
}

#[test]
fn c7_retrieval_metrics() {
    let mut ns = Vec::new();
    let mut maps = Vec::new();
    let mut rank1 = true;
    for distance in [Distance::Euclidean, Distance::Cosine] {
        for (noise, seed) in [(0.0, 3), (0.01, 4)] {
            let db = grouped_features(25, 4, noise, seed);
            let r = knn_retrieve(&db, &db, distance).unwrap();
            ns.push(ns_score(&r, &db.labels, &db.labels).unwrap());
        }
        let db = grouped_features(100, 1, 0.0, 5);
        let r = knn_retrieve(&db, &db, distance).unwrap();
        let singletons: Vec<BTreeSet<usize>> = (0..db.len()).map(|i| BTreeSet::from([i])).collect();
        maps.push(mean_ap(&r, &singletons).unwrap());
        rank1 &= r.rankings.iter().enumerate().all(|(i, rk)| rk[0] == i);

        let db = grouped_features(25, 4, 0.01, 6);
        let r = knn_retrieve(&db, &db, distance).unwrap();
        rank1 &= r.rankings.iter().enumerate().all(|(i, rk)| rk[0] == i);
    }
    report(
        "7",
        "retrieval metrics",
        ns.iter().all(|&v| v == 4.0) && maps.iter().all(|&v| v == 1.0) && rank1,
        &format!("N-S {ns:?}, singleton mAP {maps:?}, rank-1 self-retrieval {rank1}"),
    );
}

#[test]
fn c8_artifact_plumbing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_text(
        "widths = 6,6,6,6,8\nbranch_points = pool1\nC = 3\nsynth_n = 60\nsynth_size = 8\niters = 12\nbatch = 20\nlog_every = 3\n",
        &[],
    )
    .unwrap();
    let a = run_training(&cfg, &dir.path().join("a")).unwrap();
    let bytes = std::fs::read(&a.checkpoint).unwrap();
    let loaded = ModelParams::<f32>::from_checkpoint(&Checkpoint::load(&a.checkpoint).unwrap());
    let round_trip = loaded == a.outcome.params && loaded.to_checkpoint().unwrap().to_bytes() == bytes;

    let b = replay(&a.manifest, &dir.path().join("b")).unwrap();
    let log = std::fs::read(&a.log).unwrap();
    let replayed = log == std::fs::read(&b.log).unwrap() && std::fs::read(&b.checkpoint).unwrap() == bytes;
    report(
        "8",
        "artifact plumbing",
        round_trip && replayed && a.outcome.log.len() == 4,
        &format!(
            "checkpoint round trip bitwise {round_trip}, manifest replay log+checkpoint bitwise {replayed} ({} log bytes)",
            log.len()
        ),
    );
}

/// Not one of the numbered criteria but pinned alongside them: a fusion
/// network whose only branch is the main one trains exactly like the plain one.
#[test]
fn single_branch_sum_fusion_matches_plain() {
    let model = toy_model(&[]);
    let plain = build_generic_cfn(&model).unwrap();
    let mut single = plain.clone();
    let fc = single.index_of("fc").unwrap();
    let node = |name: &str, kind, input: &str| cfn_core::model::NodeSpec {
        name: name.into(),
        kind,
        out_channels: 0,
        inputs: vec![input.into()],
    };
    single.nodes.insert(fc, node("fuse", NodeKind::Fuse, "stack"));
    single.nodes.insert(fc, node("stack", NodeKind::Stack, "gap"));
    single.nodes[fc + 2].inputs = vec!["fuse".into()];
    single.fusion = Some(FusionKind::Sum);
    single.validate().unwrap();
    assert_eq!(single.branch_count(), 1);

    let data = cfn_core::data::make_synthetic(3, 300, 16, 2).unwrap();
    let cfg = TrainConfig {
        seed: 9,
        ..TrainConfig::desk(30)
    };
    let run = |g: &GraphSpec| {
        let params = ModelParams::init(g, cfg.seed).unwrap();
        train::train(g, params, &data, None, &cfg).unwrap().losses
    };
    let (a, b) = (run(&plain), run(&single));
    let worst = a.iter().zip(&b).map(|(x, y)| (*x as f64 - *y as f64).abs()).fold(0.0, f64::max);
    report(
        "S1",
        "single-branch sum fusion vs plain",
        a.len() == 30 && b.len() == 30 && worst <= 1e-12,
        &format!("{} iterations, max loss difference {worst:.1e}", a.len()),
    );
}
