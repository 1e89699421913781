//! Central finite-difference gradient oracle.

use std::fmt;

use crate::error::{Error, Result};
use crate::fusion::{self, BranchStack, FusionKind};
use crate::layers;
use crate::model::{build_generic_cfn, GraphSpec, ModelConfig, ModelParams};
use crate::network;
use crate::tensor::{Fill, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Central-difference gradient of `f` with respect to every coordinate of every parameter.
pub fn numeric_gradient<F>(mut f: F, params: &[Tensor<f64>], eps: f64) -> Result<Vec<Tensor<f64>>>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    let mut work = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = vec![0.0; params[p].len()];
        for (i, slot) in g.iter_mut().enumerate() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let plus = f(&work)?;
            work[p].data_mut()[i] = orig - eps;
            let minus = f(&work)?;
            work[p].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at parameter {p}, coordinate {i}"
                )));
            }
            *slot = (plus - minus) / (2.0 * eps);
        }
        grads.push(Tensor::from_vec(params[p].shape(), g)?);
    }
    Ok(grads)
}

/// Compares analytic gradients against central differences.
///
/// `f` returns the scalar value and the analytic gradient of every parameter.
/// The result holds the maximum relative error per parameter.
pub fn grad_check<F>(mut f: F, params: &[Tensor<f64>], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)>,
{
    let (value, analytic) = f(params)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("loss at the unperturbed point".into()));
    }
    if analytic.len() != params.len() {
        return Err(Error::shape(format!(
            "{} analytic gradients for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    for (a, p) in analytic.iter().zip(params) {
        if a.shape() != p.shape() {
            return Err(Error::shape(format!(
                "gradient {:?} for parameter {:?}",
                a.shape(),
                p.shape()
            )));
        }
        if !a.all_finite() {
            return Err(Error::NonFinite("analytic gradient".into()));
        }
    }
    let numeric = numeric_gradient(|ps| f(ps).map(|(v, _)| v), params, eps)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| {
            a.data()
                .iter()
                .zip(n.data())
                .map(|(&x, &y)| relative_error(x, y))
                .fold(0.0, f64::max)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub op: String,
    pub param: String,
    pub max_rel_err: f64,
    pub threshold: f64,
}

impl GradCheckEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.threshold
    }
}

/// Collection of per-parameter results, rendered as a plain-text table.
#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn push(&mut self, op: &str, param: &str, max_rel_err: f64, threshold: f64) {
        self.entries.push(GradCheckEntry {
            op: op.to_string(),
            param: param.to_string(),
            max_rel_err,
            threshold,
        });
    }

    /// Keeps only the worst error per `(op, param)` pair.
    pub fn merge_worst(&mut self, op: &str, param: &str, err: f64, threshold: f64) {
        match self
            .entries
            .iter_mut()
            .find(|e| e.op == op && e.param == param)
        {
            Some(e) => e.max_rel_err = e.max_rel_err.max(err),
            None => self.push(op, param, err, threshold),
        }
    }

    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(GradCheckEntry::passed)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ow = self.entries.iter().map(|e| e.op.len()).max().unwrap_or(2).max(2);
        let pw = self
            .entries
            .iter()
            .map(|e| e.param.len())
            .max()
            .unwrap_or(5)
            .max(5);
        writeln!(f, "{:<ow$}  {:<pw$}  {:>12}  {:>9}  result", "op", "param", "max_rel_err", "threshold")?;
        for e in &self.entries {
            writeln!(
                f,
                "{:<ow$}  {:<pw$}  {:>12.3e}  {:>9.0e}  {}",
                e.op,
                e.param,
                e.max_rel_err,
                e.threshold,
                if e.passed() { "pass" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Threshold for single layer operations.
pub const OP_THRESHOLD: f64 = 1e-6;
/// Threshold for a full network graph.
pub const GRAPH_THRESHOLD: f64 = 1e-5;

fn random(shape: &[usize], seed: u64) -> Result<Tensor<f64>> {
    Tensor::create(
        shape,
        Fill::Uniform {
            seed,
            lo: -1.0,
            hi: 1.0,
        },
    )
}

/// `Σ r ⊙ y` and its gradient `r`, turning a tensor-valued op into a scalar.
fn project(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn check_op<F>(
    report: &mut GradCheckReport,
    op: &str,
    names: &[&str],
    params: &[Tensor<f64>],
    f: F,
) -> Result<()>
where
    F: FnMut(&[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)>,
{
    let errs = grad_check(f, params, DEFAULT_EPS)?;
    for (name, err) in names.iter().zip(errs) {
        report.merge_worst(op, name, err, OP_THRESHOLD);
    }
    Ok(())
}

/// Checks every layer operation against central differences over `seeds`
/// random draws, and optionally the full fusion network for each fusion kind.
pub fn run_suite(seeds: u64, include_graph: bool) -> Result<GradCheckReport> {
    let mut report = GradCheckReport::default();
    for seed in 0..seeds {
        let s = |k: u64| seed * 1000 + k;

        let r = random(&[3, 4], s(1))?;
        check_op(
            &mut report,
            "fc",
            &["input", "weight", "bias"],
            &[random(&[3, 5], s(2))?, random(&[4, 5], s(3))?, random(&[4], s(4))?],
            |p| {
                let (y, tape) = layers::linear(&p[0], &p[1], &p[2])?;
                let g = tape.backward(&r)?;
                Ok((project(&y, &r), vec![g.input, g.weight, g.bias]))
            },
        )?;

        let r = random(&[2, 3], s(5))?;
        check_op(&mut report, "gap", &["input"], &[random(&[2, 3, 4, 5], s(6))?], |p| {
            let (y, tape) = layers::gap(&p[0])?;
            Ok((project(&y, &r), vec![tape.backward(&r)?]))
        })?;

        let r = random(&[2, 3, 4, 4], s(7))?;
        check_op(&mut report, "relu", &["input"], &[random(&[2, 3, 4, 4], s(8))?], |p| {
            let (y, tape) = layers::relu(&p[0]);
            Ok((project(&y, &r), vec![tape.backward(&r)?]))
        })?;

        for (op, k, pad) in [("conv1x1", 1, 0), ("conv3x3", 3, 1)] {
            let r = random(&[2, 4, 5, 5], s(9 + k as u64))?;
            check_op(
                &mut report,
                op,
                &["input", "weight", "bias"],
                &[
                    random(&[2, 3, 5, 5], s(20 + k as u64))?,
                    random(&[4, 3, k, k], s(30 + k as u64))?,
                    random(&[4], s(40 + k as u64))?,
                ],
                |p| {
                    let (y, tape) = layers::conv2d(&p[0], &p[1], &p[2], 1, pad)?;
                    let g = tape.backward(&r)?;
                    Ok((project(&y, &r), vec![g.input, g.kernel, g.bias]))
                },
            )?;
        }

        let r = random(&[2, 3, 3, 3], s(50))?;
        check_op(&mut report, "maxpool", &["input"], &[random(&[2, 3, 6, 6], s(51))?], |p| {
            let (y, tape) = layers::maxpool2d(&p[0], 2, 2)?;
            Ok((project(&y, &r), vec![tape.backward(&r)?]))
        })?;

        let labels = [0usize, 4, 2];
        check_op(
            &mut report,
            "softmax_ce",
            &["logits"],
            &[random(&[3, 5], s(52))?.scale(3.0)],
            |p| {
                let (lv, tape) = layers::softmax_cross_entropy(&p[0], &labels)?;
                Ok((lv.loss, vec![tape.backward(1.0)?]))
            },
        )?;

        let r = random(&[2, 4, 3], s(53))?;
        check_op(
            &mut report,
            "stack",
            &["branch1", "branch2", "branch3"],
            &[random(&[2, 4], s(54))?, random(&[2, 4], s(55))?, random(&[2, 4], s(56))?],
            |p| {
                let st = fusion::stack_branches(p)?;
                let v = project(st.tensor(), &r);
                Ok((v, fusion::unstack(&r)?))
            },
        )?;

        let r = random(&[2, 4], s(57))?;
        let g = random(&[2, 4, 3], s(58))?;
        check_op(&mut report, "fuse_sum", &["stack"], std::slice::from_ref(&g), |p| {
            let (y, tape) = fusion::fuse_sum(&BranchStack::from_tensor(p[0].clone())?)?;
            Ok((project(&y, &r), vec![tape.backward(&r)?.stack]))
        })?;
        check_op(
            &mut report,
            "fuse_conv",
            &["stack", "weight", "bias"],
            &[g.clone(), random(&[3], s(59))?, random(&[1], s(60))?],
            |p| {
                let (y, tape) = fusion::fuse_conv(
                    &BranchStack::from_tensor(p[0].clone())?,
                    &p[1],
                    p[2].data()[0],
                )?;
                let fg = tape.backward(&r)?;
                Ok((
                    project(&y, &r),
                    vec![fg.stack, fg.weights.unwrap(), fg.bias.unwrap()],
                ))
            },
        )?;
        check_op(
            &mut report,
            "fuse_lc",
            &["stack", "weight", "bias"],
            &[g, random(&[4, 3], s(61))?, random(&[4], s(62))?],
            |p| {
                let (y, tape) =
                    fusion::fuse_lc(&BranchStack::from_tensor(p[0].clone())?, &p[1], &p[2])?;
                let fg = tape.backward(&r)?;
                Ok((
                    project(&y, &r),
                    vec![fg.stack, fg.weights.unwrap(), fg.bias.unwrap()],
                ))
            },
        )?;
    }
    if include_graph {
        for kind in FusionKind::ALL {
            let err = check_graph(kind, 17)?;
            report.push(&format!("cfn[{kind}]"), "all", err, GRAPH_THRESHOLD);
        }
    }
    Ok(report)
}

/// Small fusion network used for whole-graph checks: three pools on an 8×8
/// input and side branches at `pool2` and `pool3`.
pub fn small_cfn(kind: FusionKind) -> Result<GraphSpec> {
    build_generic_cfn(&ModelConfig {
        widths: vec![4, 4, 6, 6, 6, 6, 6],
        branch_points: vec!["pool2".into(), "pool3".into()],
        fusion: kind,
        k: None,
        classes: 3,
        in_channels: 3,
    })
}

/// Maximum relative error over every parameter of [`small_cfn`] on a
/// `4 × 3 × 8 × 8` batch.
pub fn check_graph(kind: FusionKind, seed: u64) -> Result<f64> {
    let graph = small_cfn(kind)?;
    let mut params = ModelParams::<f64>::init(&graph, seed)?;
    // Perturb fusion parameters away from their symmetric initial values.
    if let Some(fuse) = graph.fuse_node() {
        for suffix in ["weight", "bias"] {
            let name = format!("{}.{suffix}", fuse.name);
            if let Some(t) = params.get(&name) {
                let noise = random(t.shape(), seed + 77)?.scale(0.2);
                let nudged = t.add(&noise)?;
                params.insert(name, nudged);
            }
        }
    }
    let input = random(&[4, 3, 8, 8], seed + 1)?;
    let labels = [0usize, 1, 2, 1];
    let names: Vec<String> = params.names().cloned().collect();
    let values: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let errs = grad_check(
        |ps| {
            let mut p = ModelParams::new();
            for (n, t) in names.iter().zip(ps) {
                p.insert(n.clone(), t.clone());
            }
            let (lv, tape) = network::forward(&graph, &p, &input, &labels)?;
            let g = network::backward(&graph, &tape)?;
            Ok((lv.loss, names.iter().map(|n| g.params[n].clone()).collect()))
        },
        &values,
        DEFAULT_EPS,
    )?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}
