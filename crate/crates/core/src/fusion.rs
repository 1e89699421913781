//! Side-branch fusion.
//!
//! The GAP features of all `S` branches (the main branch last) are stacked
//! into `G [N, K, S]` and reduced to one fused `[N, K]` feature by one of three
//! modules:
//!
//! * `sum`: `relu(Σ_s G[n,k,s])`, no parameters;
//! * `conv`: one `1×1×S` filter shared by every position `k`, `S + 1` parameters;
//! * `lc`: locally connected, an untied `1×1×S` filter per position,
//!   `K·(S + 1)` parameters.
//!
//! All three apply ReLU so the variants differ only in weight structure.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{relu_scalar, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionKind {
    Sum,
    Conv,
    Lc,
}

impl FusionKind {
    pub const ALL: [FusionKind; 3] = [FusionKind::Sum, FusionKind::Conv, FusionKind::Lc];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionKind::Sum => "sum",
            FusionKind::Conv => "conv",
            FusionKind::Lc => "lc",
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(FusionKind::Sum),
            "conv" => Ok(FusionKind::Conv),
            "lc" => Ok(FusionKind::Lc),
            other => Err(Error::InvalidValue {
                key: "fusion".into(),
                msg: format!("{other:?} is not one of sum, conv, lc"),
            }),
        }
    }
}

/// Stacked GAP features `G [N, K, S]`; slice `s = S-1` is the main branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchStack<T: Real> {
    g: Tensor<T>,
}

impl<T: Real> BranchStack<T> {
    pub fn from_tensor(g: Tensor<T>) -> Result<Self> {
        if g.rank() != 3 {
            return Err(Error::shape(format!(
                "branch stack must be [N, K, S], got {:?}",
                g.shape()
            )));
        }
        Ok(BranchStack { g })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.g
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.g
    }

    pub fn batch(&self) -> usize {
        self.g.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.g.shape()[1]
    }

    pub fn branches(&self) -> usize {
        self.g.shape()[2]
    }

    /// GAP feature of branch `s` (0-based), `[N, K]`.
    pub fn branch(&self, s: usize) -> Result<Tensor<T>> {
        Ok(unstack(&self.g)?.swap_remove(s))
    }
}

/// Stacks `S` branch features of shape `[N, K]` into `G [N, K, S]`.
pub fn stack_branches<T: Real>(gaps: &[Tensor<T>]) -> Result<BranchStack<T>> {
    let first = gaps
        .first()
        .ok_or_else(|| Error::Fusion("at least one branch is required".into()))?;
    let (n, k) = first.dims2("branch feature")?;
    if let Some(bad) = gaps.iter().find(|g| g.shape() != [n, k]) {
        return Err(Error::Fusion(format!(
            "ragged branches: {:?} vs {:?}",
            bad.shape(),
            first.shape()
        )));
    }
    let s = gaps.len();
    let mut data = vec![T::zero(); n * k * s];
    for (si, g) in gaps.iter().enumerate() {
        for (nk, &v) in g.data().iter().enumerate() {
            data[nk * s + si] = v;
        }
    }
    BranchStack::from_tensor(Tensor::from_vec(&[n, k, s], data)?)
}

/// Splits a `[N, K, S]` tensor (typically a stack gradient) back into `S` tensors `[N, K]`.
pub fn unstack<T: Real>(g: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let (n, k, s) = match *g.shape() {
        [n, k, s] => (n, k, s),
        _ => {
            return Err(Error::shape(format!(
                "unstack expects [N, K, S], got {:?}",
                g.shape()
            )))
        }
    };
    (0..s)
        .map(|si| {
            let data = g.data().iter().skip(si).step_by(s).copied().collect();
            Tensor::from_vec(&[n, k], data)
        })
        .collect()
}

/// Learnable state of a fusion module.
#[derive(Debug, Clone, PartialEq)]
pub enum FusionParams<T: Real> {
    Sum,
    /// `weights [S]` shared over all `K` positions, `bias [1]`.
    Conv { weights: Tensor<T>, bias: Tensor<T> },
    /// `weights [K, S]`, `bias [K]`.
    Lc { weights: Tensor<T>, bias: Tensor<T> },
}

impl<T: Real> FusionParams<T> {
    pub fn kind(&self) -> FusionKind {
        match self {
            FusionParams::Sum => FusionKind::Sum,
            FusionParams::Conv { .. } => FusionKind::Conv,
            FusionParams::Lc { .. } => FusionKind::Lc,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            FusionParams::Sum => 0,
            FusionParams::Conv { weights, bias } | FusionParams::Lc { weights, bias } => {
                weights.len() + bias.len()
            }
        }
    }
}

/// LC fusion initialised with every weight `1/S` and zero bias.
pub fn init_lc<T: Real>(k: usize, s: usize) -> Result<FusionParams<T>> {
    let w = T::one() / T::from_f64(s as f64);
    Ok(FusionParams::Lc {
        weights: Tensor::from_vec(&[k, s], vec![w; k * s])?,
        bias: Tensor::zeros(&[k])?,
    })
}

/// Default initialisation for any fusion kind: averaging weights, zero bias.
pub fn init_fusion<T: Real>(kind: FusionKind, k: usize, s: usize) -> Result<FusionParams<T>> {
    match kind {
        FusionKind::Sum => Ok(FusionParams::Sum),
        FusionKind::Conv => Ok(FusionParams::Conv {
            weights: Tensor::from_vec(&[s], vec![T::one() / T::from_f64(s as f64); s])?,
            bias: Tensor::zeros(&[1])?,
        }),
        FusionKind::Lc => init_lc(k, s),
    }
}

pub fn fusion_param_count(kind: FusionKind, k: usize, s: usize) -> usize {
    match kind {
        FusionKind::Sum => 0,
        FusionKind::Conv => s + 1,
        FusionKind::Lc => k * (s + 1),
    }
}

/// Saved state for the fusion backward pass.
#[derive(Debug, Clone)]
pub struct FuseTape<T: Real> {
    stack: Tensor<T>,
    pre: Vec<T>,
    params: FusionParams<T>,
}

#[derive(Debug, Clone)]
pub struct FuseGrads<T: Real> {
    /// Gradient with respect to `G`, `[N, K, S]`.
    pub stack: Tensor<T>,
    /// `None` for sum fusion.
    pub weights: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

/// Applies any fusion module to the stack.
pub fn fuse<T: Real>(
    stack: &BranchStack<T>,
    params: &FusionParams<T>,
) -> Result<(Tensor<T>, FuseTape<T>)> {
    let g = stack.tensor();
    let (n, k, s) = (stack.batch(), stack.channels(), stack.branches());
    match params {
        FusionParams::Sum => {}
        FusionParams::Conv { weights, bias } => {
            if weights.shape() != [s] || bias.shape() != [1] {
                return Err(Error::shape(format!(
                    "conv fusion expects weights [{s}] and bias [1], got {:?} and {:?}",
                    weights.shape(),
                    bias.shape()
                )));
            }
        }
        FusionParams::Lc { weights, bias } => {
            if weights.shape() != [k, s] || bias.shape() != [k] {
                return Err(Error::shape(format!(
                    "lc fusion expects weights [{k}, {s}] and bias [{k}], got {:?} and {:?}",
                    weights.shape(),
                    bias.shape()
                )));
            }
        }
    }
    let mut pre = Vec::with_capacity(n * k);
    for (nk, cell) in g.data().chunks_exact(s).enumerate() {
        let ki = nk % k;
        let mut acc = T::zero();
        match params {
            FusionParams::Sum => {
                for &v in cell {
                    acc += v;
                }
            }
            FusionParams::Conv { weights, bias } => {
                for (&w, &v) in weights.data().iter().zip(cell) {
                    acc += w * v;
                }
                acc += bias.data()[0];
            }
            FusionParams::Lc { weights, bias } => {
                for (&w, &v) in weights.data()[ki * s..(ki + 1) * s].iter().zip(cell) {
                    acc += w * v;
                }
                acc += bias.data()[ki];
            }
        }
        pre.push(acc);
    }
    let out = Tensor::from_vec(&[n, k], pre.iter().map(|&x| relu_scalar(x)).collect())?;
    Ok((
        out,
        FuseTape {
            stack: g.clone(),
            pre,
            params: params.clone(),
        },
    ))
}

/// Sum-pooling fusion: `relu(Σ_s G[n,k,s])`.
pub fn fuse_sum<T: Real>(stack: &BranchStack<T>) -> Result<(Tensor<T>, FuseTape<T>)> {
    fuse(stack, &FusionParams::Sum)
}

/// Convolution fusion with one filter shared across all `K` positions.
pub fn fuse_conv<T: Real>(
    stack: &BranchStack<T>,
    shared: &Tensor<T>,
    bias: T,
) -> Result<(Tensor<T>, FuseTape<T>)> {
    fuse(
        stack,
        &FusionParams::Conv {
            weights: shared.clone(),
            bias: Tensor::scalar(bias),
        },
    )
}

/// Locally connected fusion: `relu(Σ_j W[i,j]·G[n,i,j] + b[i])`.
pub fn fuse_lc<T: Real>(
    stack: &BranchStack<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, FuseTape<T>)> {
    fuse(
        stack,
        &FusionParams::Lc {
            weights: weights.clone(),
            bias: bias.clone(),
        },
    )
}

impl<T: Real> FuseTape<T> {
    pub fn backward(&self, grad_out: &Tensor<T>) -> Result<FuseGrads<T>> {
        let (n, k, s) = match *self.stack.shape() {
            [n, k, s] => (n, k, s),
            _ => return Err(Error::MissingTape),
        };
        if grad_out.shape() != [n, k] {
            return Err(Error::shape(format!(
                "fusion backward: upstream {:?}, expected [{n}, {k}]",
                grad_out.shape()
            )));
        }
        let masked: Vec<T> = grad_out
            .data()
            .iter()
            .zip(&self.pre)
            .map(|(&g, &p)| if p > T::zero() { g } else { T::zero() })
            .collect();
        let g = self.stack.data();
        let mut dg = vec![T::zero(); g.len()];
        match &self.params {
            FusionParams::Sum => {
                for (nk, &m) in masked.iter().enumerate() {
                    dg[nk * s..(nk + 1) * s].fill(m);
                }
                Ok(FuseGrads {
                    stack: Tensor::from_vec(self.stack.shape(), dg)?,
                    weights: None,
                    bias: None,
                })
            }
            FusionParams::Conv { weights, .. } => {
                let w = weights.data();
                let mut dw = vec![T::zero(); s];
                let mut db = T::zero();
                for (nk, &m) in masked.iter().enumerate() {
                    let cell = &g[nk * s..(nk + 1) * s];
                    for j in 0..s {
                        dg[nk * s + j] = m * w[j];
                        dw[j] += m * cell[j];
                    }
                    db += m;
                }
                Ok(FuseGrads {
                    stack: Tensor::from_vec(self.stack.shape(), dg)?,
                    weights: Some(Tensor::from_vec(&[s], dw)?),
                    bias: Some(Tensor::scalar(db)),
                })
            }
            FusionParams::Lc { weights, .. } => {
                let w = weights.data();
                let mut dw = vec![T::zero(); k * s];
                let mut db = vec![T::zero(); k];
                for (nk, &m) in masked.iter().enumerate() {
                    let ki = nk % k;
                    let cell = &g[nk * s..(nk + 1) * s];
                    for j in 0..s {
                        dg[nk * s + j] = m * w[ki * s + j];
                        dw[ki * s + j] += m * cell[j];
                    }
                    db[ki] += m;
                }
                Ok(FuseGrads {
                    stack: Tensor::from_vec(self.stack.shape(), dg)?,
                    weights: Some(Tensor::from_vec(&[k, s], dw)?),
                    bias: Some(Tensor::from_vec(&[k], db)?),
                })
            }
        }
    }
}

/// Parameter counts of the two prediction strategies.
///
/// `*_actual` count the fully connected layers directly (`C·(K+1)` weights and
/// biases each). `*_formula` evaluate the closed-form expressions
/// `S(C+1) + W_fuse` and `S·K·(C+1) + W_fuse`. Both are reported because the
/// two disagree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictionAudit {
    pub fusion_params: usize,
    pub eflp_actual: usize,
    pub eplf_actual: usize,
    pub eflp_formula: usize,
    pub eplf_formula: usize,
}

pub fn prediction_strategy_audit(k: usize, c: usize, s: usize, kind: FusionKind) -> PredictionAudit {
    let w_fuse = fusion_param_count(kind, k, s);
    PredictionAudit {
        fusion_params: w_fuse,
        eflp_actual: c * (k + 1) + w_fuse,
        eplf_actual: s * c * (k + 1) + w_fuse,
        eflp_formula: s * (c + 1) + w_fuse,
        eplf_formula: s * k * (c + 1) + w_fuse,
    }
}
