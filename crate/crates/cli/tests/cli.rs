use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cfn(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfn"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn cfn")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TOY: &str = "widths = 4,4,4,4,4,4,6\nC = 3\nsynth_n = 24\nsynth_size = 8\niters = 6\nbatch = 8\n";

/// Entries of `dir`, recursively, relative to it.
fn tree(dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        let rel = p.strip_prefix(dir).unwrap().display().to_string();
        if p.is_dir() {
            out.extend(tree(&p).into_iter().map(|s| format!("{rel}/{s}")));
        } else {
            out.push(rel);
        }
    }
    out.sort();
    out
}

#[test]
fn params_table_reconciles() {
    let dir = tempfile::tempdir().unwrap();
    let o = cfn(&["params", "--model", "cifar-cfn", "--fusion", "lc"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s = stdout(&o);
    for n in ["1,286,698", "74,112", "768"] {
        assert!(s.contains(n), "missing {n} in\n{s}");
    }
    let o = cfn(&["params", "--model", "cifar-cfn", "--fusion", "conv"], dir.path());
    assert!(stdout(&o).contains(&format!("{:<16}{:>12}", "fusion", "4")));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = cfn(&["train", "--no-such-flag"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(cfn(&["--help"], dir.path()).status.code(), Some(0));
    assert_eq!(cfn(&["bogus"], dir.path()).status.code(), Some(1));

    fs::write(dir.path().join("bad.cfg"), "lr = 0.1\nlr = 0.2\n").unwrap();
    let o = cfn(&["train", "--config", "bad.cfg", "--out", "o"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("lines 1 and 2"), "{}", stderr(&o));

    fs::write(dir.path().join("unknown.cfg"), "learning_rate = 0.1\n").unwrap();
    assert_eq!(cfn(&["train", "--config", "unknown.cfg", "--out", "o"], dir.path()).status.code(), Some(1));

    let o = cfn(&["train", "--set", "data=dataset", "--set", "data_path=nope.ckpt", "--set", "C=3", "--out", "o"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn grad_check_all_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = cfn(&["grad-check", "--all", "--seeds", "2", "--out", "gc"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s = stdout(&o);
    for op in ["fc", "gap", "relu", "conv1x1", "conv3x3", "maxpool", "softmax_ce", "stack", "fuse_sum", "fuse_conv", "fuse_lc", "cfn[lc]"] {
        assert!(s.contains(op), "missing {op}");
    }
    assert!(!s.contains("FAIL"));
    assert!(dir.path().join("gc/grad_check.csv").exists());
}

#[test]
fn pipeline_stays_inside_out_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("toy.cfg"), TOY).unwrap();
    let ok = |args: &[&str]| {
        let o = cfn(args, d);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
        o
    };
    ok(&["train", "--config", "toy.cfg", "--out", "run"]);
    let log = fs::read_to_string(d.join("run/train_log.csv")).unwrap();
    assert!(log.starts_with("iter,lr,loss,top1,top5\n"));

    ok(&["train", "--config", "run/manifest.cfg", "--out", "replay"]);
    assert_eq!(fs::read(d.join("run/train_log.csv")).unwrap(), fs::read(d.join("replay/train_log.csv")).unwrap());
    assert_eq!(fs::read(d.join("run/model.ckpt")).unwrap(), fs::read(d.join("replay/model.ckpt")).unwrap());

    let o = ok(&["train", "--config", "toy.cfg", "--set", "lr=0.01", "--seed", "4", "--out", "over"]);
    assert!(stdout(&o).contains("checkpoint"));
    let m = fs::read_to_string(d.join("over/manifest.cfg")).unwrap();
    assert!(m.contains("lr = 0.01") && m.contains("seed = 4"));

    let run = ["--config", "run/manifest.cfg", "--checkpoint", "run/model.ckpt"];
    ok(&[&["eval"], &run[..], &["--out", "eval"]].concat());
    ok(&[&["extract"], &run[..], &["--out", "feat"]].concat());
    ok(&["probe", "--train", "feat/features_train.csv", "--test", "feat/features_train.ckpt", "--out", "probe"]);
    let o = ok(&["retrieve", "--db", "feat/features_train.ckpt", "--out", "ret", "--distance", "euclidean"]);
    assert!(stdout(&o).contains("mAP"));
    let o = ok(&[&["rank-maps"], &run[..], &["--out", "maps", "--top", "2"]].concat());
    assert!(stdout(&o).contains("branch1.relu"));
    ok(&[&["lc-weights"], &run[..], &["--out", "lc"]].concat());
    ok(&["make-synth", "--classes", "3", "--n", "12", "--size", "8", "--out", "synth"]);

    assert_eq!(tree(&d.join("eval")), ["eval.csv", "manifest.cfg"]);
    assert_eq!(
        tree(&d.join("feat")),
        ["features_train.ckpt", "features_train.csv", "manifest.cfg"]
    );
    assert_eq!(tree(&d.join("maps")).len(), 4);
    assert!(tree(&d.join("maps")).iter().any(|f| f.starts_with("map_1_") && f.ends_with(".pgm")));
    let means = fs::read_to_string(d.join("lc/lc_means.csv")).unwrap();
    assert!(means.starts_with("branch,mean_weight\n"));
    assert_eq!(tree(&d.join("synth")), ["dataset.ckpt", "manifest.cfg"]);

    let mut top: Vec<String> = fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    top.sort();
    assert_eq!(top, ["eval", "feat", "lc", "maps", "over", "probe", "replay", "ret", "run", "synth", "toy.cfg"]);
}

#[test]
fn lc_weights_rejects_other_fusions() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("toy.cfg"), format!("{TOY}fusion = sum\n")).unwrap();
    assert_eq!(cfn(&["train", "--config", "toy.cfg", "--out", "run"], d).status.code(), Some(0));
    let o = cfn(&["lc-weights", "--config", "run/manifest.cfg", "--checkpoint", "run/model.ckpt", "--out", "lc"], d);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("sum"));
}
