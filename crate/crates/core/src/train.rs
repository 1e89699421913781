//! Mini-batch SGD with momentum, step learning-rate schedule and evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::{augment_batch, BatchStream, Dataset};
use crate::error::{Error, Result};
use crate::model::{mix_seed, GraphSpec, ModelParams};
use crate::network::{backward, forward, logits};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    /// L2 coefficient, applied to `*.weight` tensors only.
    pub wd: f64,
    pub batch: usize,
    pub iters: usize,
    /// Iterations at which the rate is multiplied by `decay`.
    pub drops: Vec<usize>,
    pub decay: f64,
    pub seed: u64,
    pub augment: bool,
    /// Iterations between log records; 0 means once per epoch.
    pub log_every: usize,
}

impl TrainConfig {
    /// Desk-scale schedule: lr 0.05, one ×0.1 drop at two thirds of `iters`.
    /// Momentum is off: without normalisation layers, 0.05 with momentum 0.9
    /// kills most ReLUs of small networks within a few hundred steps.
    pub fn desk(iters: usize) -> Self {
        TrainConfig {
            lr: 0.05,
            momentum: 0.0,
            wd: 1e-4,
            batch: 100,
            iters,
            drops: vec![iters * 2 / 3],
            decay: 0.1,
            seed: 0,
            augment: false,
            log_every: 0,
        }
    }

    /// The full CIFAR protocol: lr 0.1 divided by 10 after 100k iterations,
    /// stopping at 120k, batch 100, momentum 0.9, weight decay 1e-4.
    pub fn full() -> Self {
        TrainConfig {
            lr: 0.1,
            momentum: 0.9,
            drops: vec![100_000],
            iters: 120_000,
            ..Self::desk(120_000)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::InvalidValue {
                key: key.into(),
                msg: msg.into(),
            })
        };
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if !(self.wd >= 0.0 && self.wd.is_finite()) {
            return bad("wd", "must be finite and non-negative");
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad("decay", "must lie in (0, 1]");
        }
        if self.batch == 0 {
            return bad("batch", "must be positive");
        }
        if self.iters == 0 {
            return bad("iters", "must be positive");
        }
        if self.drops.windows(2).any(|w| w[0] >= w[1]) {
            return bad("drops", "must be strictly increasing");
        }
        Ok(())
    }
}

/// Learning rate at `iter`, or `None` once training should stop.
pub fn lr_schedule(cfg: &TrainConfig, iter: usize) -> Option<f64> {
    if iter >= cfg.iters {
        return None;
    }
    let passed = cfg.drops.iter().filter(|&&d| iter >= d).count();
    Some(cfg.lr * cfg.decay.powi(passed as i32))
}

/// One momentum step: `v ← m·v − lr·(g + wd·p)`, `p ← p + v`.
/// Weight decay only touches `*.weight` tensors.
pub fn sgd_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    velocity: &mut ModelParams<T>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || params.names().any(|n| !grads.contains_key(n)) {
        return Err(Error::Shape("gradient and parameter names differ".into()));
    }
    for (name, g) in grads {
        let bad = g.data().iter().filter(|v| !v.is_finite()).count();
        if bad > 0 {
            return Err(Error::NonFinite(format!(
                "{bad} of {} gradient entries of {name:?}",
                g.len()
            )));
        }
    }
    let m = T::from_f64(cfg.momentum);
    let lr_t = T::from_f64(lr);
    for (name, g) in grads {
        let wd = T::from_f64(if name.ends_with(".weight") { cfg.wd } else { 0.0 });
        let p = params.get_mut(name).expect("checked above");
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient of {name:?} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if velocity.get(name).is_none() {
            velocity.insert(name.clone(), Tensor::zeros(p.shape())?);
        }
        let v = velocity.get_mut(name).expect("inserted above");
        for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = m * *vv - lr_t * (gv + wd * *pv);
            *pv += *vv;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub iter: usize,
    pub lr: f64,
    /// Mean mini-batch loss since the previous record.
    pub loss: f64,
    pub top1: f64,
    pub top5: Option<f64>,
}

pub const LOG_HEADER: &str = "iter,lr,loss,top1,top5";

/// CSV training log; `top5` is left empty when fewer than five classes exist.
pub fn log_csv(records: &[LogRecord]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in records {
        let top5 = r.top5.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{},{}", r.iter, r.lr, r.loss, r.top1, top5);
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainStatus {
    Completed,
    /// Loss or gradients became non-finite at `iter`; parameters are the last
    /// finite ones.
    Diverged { iter: usize, reason: String },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub log: Vec<LogRecord>,
    /// Loss of every mini-batch, in iteration order.
    pub losses: Vec<f32>,
    pub status: TrainStatus,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> Option<f32> {
        self.losses.last().copied()
    }
}

/// Trains `params` on `data`. Log records evaluate on `eval` if given,
/// otherwise on the (unaugmented) training set.
pub fn train(
    graph: &GraphSpec,
    mut params: ModelParams<f32>,
    data: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    params.check_against(graph)?;
    let stream = BatchStream::new(data.len(), cfg.batch, cfg.seed)?;
    let per_epoch = stream.batches_per_epoch();
    let log_every = if cfg.log_every == 0 { per_epoch } else { cfg.log_every };
    let eval_set = eval.unwrap_or(data);

    let mut velocity = ModelParams::new();
    let mut log = Vec::new();
    let mut losses = Vec::with_capacity(cfg.iters);
    let mut window = 0.0f64;
    let mut window_len = 0usize;
    let mut epoch_batches = Vec::new();
    let mut status = TrainStatus::Completed;

    let mut iter = 0;
    while let Some(lr) = lr_schedule(cfg, iter) {
        let epoch = iter / per_epoch;
        if iter % per_epoch == 0 {
            epoch_batches = stream.batches(epoch);
        }
        let idx = &epoch_batches[iter % per_epoch];
        let (mut images, labels) = data.batch(idx)?;
        if cfg.augment {
            let seeds: Vec<u64> = idx
                .iter()
                .map(|&i| mix_seed(cfg.seed ^ 0xa5a5, (epoch * data.len() + i) as u64))
                .collect();
            images = augment_batch(&images, &seeds)?;
        }
        let (loss, tape) = forward(graph, &params, &images, &labels)?;
        let loss = loss.loss;
        if !loss.is_finite() {
            status = TrainStatus::Diverged {
                iter,
                reason: format!("loss is {loss}"),
            };
            break;
        }
        let grads = backward(graph, &tape)?;
        let before = params.clone();
        match sgd_step(&mut params, &grads.params, &mut velocity, cfg, lr) {
            Ok(()) => {}
            Err(Error::NonFinite(msg)) => {
                params = before;
                status = TrainStatus::Diverged { iter, reason: msg };
                break;
            }
            Err(e) => return Err(e),
        }
        if params.iter().any(|(_, t)| !t.all_finite()) {
            params = before;
            status = TrainStatus::Diverged {
                iter,
                reason: "parameters became non-finite".into(),
            };
            break;
        }
        losses.push(loss);
        window += loss as f64;
        window_len += 1;
        iter += 1;
        if iter % log_every == 0 || iter == cfg.iters {
            let ev = evaluate(graph, &params, eval_set, cfg.batch.max(100))?;
            log.push(LogRecord {
                iter,
                lr,
                loss: window / window_len as f64,
                top1: ev.top1,
                top5: ev.top5,
            });
            window = 0.0;
            window_len = 0;
        }
    }
    Ok(TrainOutcome {
        params,
        log,
        losses,
        status,
    })
}

/// Error rates as fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub top1: f64,
    pub top5: Option<f64>,
    pub samples: usize,
}

impl EvalResult {
    pub fn accuracy(&self) -> f64 {
        1.0 - self.top1
    }
}

/// Rank of `label` among `row` (0 = predicted). Equal scores rank the lower
/// class index first.
pub fn label_rank<T: Real>(row: &[T], label: usize) -> usize {
    let target = row[label];
    row.iter()
        .enumerate()
        .filter(|&(c, &v)| v > target || (v == target && c < label))
        .count()
}

/// Arg-max with ties broken towards the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn count_errors<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(usize, usize, usize)> {
    let (n, c) = logits.dims2("logits")?;
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} rows", labels.len())));
    }
    let mut wrong1 = 0usize;
    let mut wrong5 = 0usize;
    for (row, &l) in logits.data().chunks_exact(c).zip(labels) {
        if l >= c {
            return Err(Error::LabelOutOfRange { label: l, classes: c });
        }
        let r = label_rank(row, l);
        wrong1 += (r >= 1) as usize;
        wrong5 += (r >= 5) as usize;
    }
    Ok((wrong1, wrong5, c))
}

fn rates(wrong1: usize, wrong5: usize, classes: usize, n: usize) -> EvalResult {
    EvalResult {
        top1: wrong1 as f64 / n as f64,
        top5: (classes >= 5).then(|| wrong5 as f64 / n as f64),
        samples: n,
    }
}

/// Top-1 and top-5 error of precomputed logits `[N, C]`.
pub fn score_logits<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<EvalResult> {
    let (w1, w5, c) = count_errors(logits, labels)?;
    Ok(rates(w1, w5, c, labels.len()))
}

/// Evaluates in fixed-order chunks of `batch` samples.
pub fn evaluate(
    graph: &GraphSpec,
    params: &ModelParams<f32>,
    data: &Dataset,
    batch: usize,
) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let batch = batch.max(1);
    let (mut w1, mut w5, mut classes) = (0, 0, data.classes);
    for start in (0..data.len()).step_by(batch) {
        let idx: Vec<usize> = (start..(start + batch).min(data.len())).collect();
        let (images, labels) = data.batch(&idx)?;
        let (a, b, c) = count_errors(&logits(graph, params, &images)?, &labels)?;
        w1 += a;
        w5 += b;
        classes = c;
    }
    Ok(rates(w1, w5, classes, data.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, Split};
    use crate::fusion::FusionKind;
    use crate::model::{build_generic_cfn, ModelConfig};

    fn one_param(v: f64, g: f64) -> (ModelParams<f64>, BTreeMap<String, Tensor<f64>>) {
        let mut p = ModelParams::new();
        p.insert("a.weight", Tensor::from_f64s(&[1], &[v]).unwrap());
        let mut grads = BTreeMap::new();
        grads.insert("a.weight".to_string(), Tensor::from_f64s(&[1], &[g]).unwrap());
        (p, grads)
    }

    fn cfg(momentum: f64, wd: f64) -> TrainConfig {
        TrainConfig {
            momentum,
            wd,
            ..TrainConfig::desk(10)
        }
    }

    #[test]
    fn vanilla_step() {
        let (mut p, g) = one_param(1.0, 2.0);
        let mut v = ModelParams::new();
        sgd_step(&mut p, &g, &mut v, &cfg(0.0, 0.0), 0.1).unwrap();
        assert!((p.get("a.weight").unwrap().data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn velocity_decays_geometrically() {
        let (mut p, _) = one_param(0.0, 0.0);
        let mut v = ModelParams::new();
        v.insert("a.weight", Tensor::from_f64s(&[1], &[1.0]).unwrap());
        let (_, zero) = one_param(0.0, 0.0);
        for k in 1..5 {
            sgd_step(&mut p, &zero, &mut v, &cfg(0.9, 0.0), 0.1).unwrap();
            assert!((v.get("a.weight").unwrap().data()[0] - 0.9f64.powi(k)).abs() < 1e-12);
        }
    }

    #[test]
    fn decay_only_shrinks() {
        let (mut p, g) = one_param(2.0, 0.0);
        let mut v = ModelParams::new();
        sgd_step(&mut p, &g, &mut v, &cfg(0.0, 0.01), 0.5).unwrap();
        assert!((p.get("a.weight").unwrap().data()[0] - 2.0 * (1.0 - 0.5 * 0.01)).abs() < 1e-15);

        let mut b = ModelParams::<f64>::new();
        b.insert("a.bias", Tensor::from_f64s(&[1], &[2.0]).unwrap());
        let mut gb = BTreeMap::new();
        gb.insert("a.bias".to_string(), Tensor::from_f64s(&[1], &[0.0]).unwrap());
        sgd_step(&mut b, &gb, &mut ModelParams::new(), &cfg(0.0, 0.01), 0.5).unwrap();
        assert_eq!(b.get("a.bias").unwrap().data()[0], 2.0);
    }

    #[test]
    fn weight_decay_monotone_norm() {
        let mut p = ModelParams::<f64>::new();
        p.insert("x.weight", Tensor::from_f64s(&[3], &[1.0, -2.0, 0.5]).unwrap());
        let mut g = BTreeMap::new();
        g.insert("x.weight".to_string(), Tensor::zeros(&[3]).unwrap());
        let mut v = ModelParams::new();
        let mut prev = p.l2_norm_sq();
        for _ in 0..50 {
            sgd_step(&mut p, &g, &mut v, &cfg(0.9, 1e-2), 0.1).unwrap();
            let now = p.l2_norm_sq();
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let (mut p, g) = one_param(1.0, f64::NAN);
        let err = sgd_step(&mut p, &g, &mut ModelParams::new(), &cfg(0.0, 0.0), 0.1).unwrap_err();
        assert!(err.to_string().contains("a.weight"));
    }

    #[test]
    fn schedule() {
        let full = TrainConfig::full();
        assert_eq!(lr_schedule(&full, 0), Some(0.1));
        let late = lr_schedule(&full, 100_001).unwrap();
        assert!((late - 0.01).abs() < 1e-15);
        assert_eq!(lr_schedule(&full, 120_000), None);
        let desk = TrainConfig::desk(300);
        assert_eq!(lr_schedule(&desk, 199), Some(0.05));
        assert!((lr_schedule(&desk, 200).unwrap() - 0.005).abs() < 1e-15);
    }

    #[test]
    fn validation() {
        let mut c = TrainConfig::desk(10);
        c.drops = vec![5, 5];
        assert!(c.validate().is_err());
        c.drops = vec![];
        c.momentum = 1.0;
        assert!(c.validate().is_err());
        c.momentum = 0.5;
        c.batch = 0;
        assert!(c.validate().unwrap_err().is_validation());
    }

    #[test]
    fn scoring_rules() {
        let l = Tensor::<f32>::from_f64s(&[2, 3], &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let r = score_logits(&l, &[1, 0]).unwrap();
        assert_eq!(r.top1, 0.5);
        assert_eq!(r.top5, None);
        assert_eq!(argmax(&[0.5f32, 0.5, 0.1]), 0);

        let n = 50;
        let mut data = vec![0.0; n * 10];
        for i in 0..n {
            data[i * 10] = 1.0;
        }
        let l = Tensor::<f32>::from_f64s(&[n, 10], &data).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
        assert!((score_logits(&l, &labels).unwrap().top1 - 0.9).abs() < 1e-12);
        let perfect: Vec<f64> = (0..n * 10).map(|j| (j % 10 == (j / 10) % 10) as u8 as f64).collect();
        let r = score_logits(&Tensor::<f32>::from_f64s(&[n, 10], &perfect).unwrap(), &labels).unwrap();
        assert_eq!(r.top1, 0.0);
        assert_eq!(r.top5, Some(0.0));
    }

    fn toy() -> (GraphSpec, Dataset) {
        let g = build_generic_cfn(&ModelConfig {
            widths: vec![4, 4, 6],
            branch_points: vec!["pool1".into()],
            fusion: FusionKind::Lc,
            k: None,
            classes: 3,
            in_channels: 3,
        })
        .unwrap();
        (g, make_synthetic(3, 30, 8, 4).unwrap())
    }

    #[test]
    fn zero_lr_keeps_params() {
        let (g, d) = toy();
        let p = ModelParams::init(&g, 1).unwrap();
        let mut c = TrainConfig::desk(9);
        c.lr = 0.0;
        c.batch = 8;
        let out = train(&g, p.clone(), &d, None, &c).unwrap();
        assert_eq!(out.params, p);
        assert_eq!(out.losses.len(), 9);
    }

    #[test]
    fn training_is_deterministic_and_logs() {
        let (g, d) = toy();
        let mut c = TrainConfig::desk(12);
        c.batch = 8;
        c.augment = true;
        let run = || train(&g, ModelParams::init(&g, 2).unwrap(), &d, None, &c).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.params, b.params);
        assert_eq!(a.status, TrainStatus::Completed);
        assert_eq!(a.log.iter().map(|r| r.iter).collect::<Vec<_>>(), vec![4, 8, 12]);
        let csv = log_csv(&a.log);
        assert!(csv.starts_with("iter,lr,loss,top1,top5\n4,0.05,"));
    }

    #[test]
    fn divergence_is_reported() {
        let (g, d) = toy();
        let mut c = TrainConfig::desk(50);
        c.lr = 1e30;
        c.batch = 8;
        let p = ModelParams::init(&g, 3).unwrap();
        let out = train(&g, p, &d, None, &c).unwrap();
        assert!(matches!(out.status, TrainStatus::Diverged { .. }), "{:?}", out.status);
        assert!(out.params.iter().all(|(_, t)| t.all_finite()));
    }

    #[test]
    fn evaluate_permutation_invariant() {
        let (g, d) = toy();
        let p = ModelParams::init(&g, 5).unwrap();
        let a = evaluate(&g, &p, &d, 7).unwrap();
        let rev: Vec<usize> = (0..d.len()).rev().collect();
        let (img, lab) = d.batch(&rev).unwrap();
        let shuffled = Dataset::new(img, lab, d.classes, Split::Train).unwrap();
        assert_eq!(a, evaluate(&g, &p, &shuffled, 4).unwrap());
    }
}
