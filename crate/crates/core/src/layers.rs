//! Differentiable layer operations.
//!
//! Each forward function returns its output together with a small tape struct
//! holding whatever the backward pass needs. `backward` takes the upstream
//! gradient and returns gradients for every differentiable input.

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeometry, Real, Tensor};

#[derive(Debug, Clone)]
pub struct LinearTape<T: Real> {
    input: Tensor<T>,
    weight: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct LinearGrads<T: Real> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Fully connected layer: `out = input · weightᵀ + bias` with `input [N,K]`,
/// `weight [C,K]`, `bias [C]`.
pub fn linear<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, LinearTape<T>)> {
    let (n, k) = input.dims2("linear input")?;
    let (c, wk) = weight.dims2("linear weight")?;
    if wk != k || bias.shape() != [c] {
        return Err(Error::shape(format!(
            "linear: input {:?}, weight {:?}, bias {:?}",
            input.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let x = input.data();
    let w = weight.data();
    let mut out = Vec::with_capacity(n * c);
    for row in x.chunks_exact(k) {
        for (j, wrow) in w.chunks_exact(k).enumerate() {
            let mut acc = bias.data()[j];
            for (a, b) in row.iter().zip(wrow) {
                acc += *a * *b;
            }
            out.push(acc);
        }
    }
    Ok((
        Tensor::from_vec(&[n, c], out)?,
        LinearTape {
            input: input.clone(),
            weight: weight.clone(),
        },
    ))
}

impl<T: Real> LinearTape<T> {
    pub fn backward(&self, grad_out: &Tensor<T>) -> Result<LinearGrads<T>> {
        let (n, k) = self.input.dims2("linear input")?;
        let (c, _) = self.weight.dims2("linear weight")?;
        if grad_out.shape() != [n, c] {
            return Err(Error::shape(format!(
                "linear backward: upstream {:?}, expected [{n}, {c}]",
                grad_out.shape()
            )));
        }
        let x = self.input.data();
        let w = self.weight.data();
        let g = grad_out.data();
        let mut gx = vec![T::zero(); n * k];
        let mut gw = vec![T::zero(); c * k];
        let mut gb = vec![T::zero(); c];
        for i in 0..n {
            let xrow = &x[i * k..(i + 1) * k];
            let gxrow = &mut gx[i * k..(i + 1) * k];
            for j in 0..c {
                let gv = g[i * c + j];
                gb[j] += gv;
                let wrow = &w[j * k..(j + 1) * k];
                for (dst, &wv) in gxrow.iter_mut().zip(wrow) {
                    *dst += gv * wv;
                }
                for (dst, &xv) in gw[j * k..(j + 1) * k].iter_mut().zip(xrow) {
                    *dst += gv * xv;
                }
            }
        }
        Ok(LinearGrads {
            input: Tensor::from_vec(&[n, k], gx)?,
            weight: Tensor::from_vec(&[c, k], gw)?,
            bias: Tensor::from_vec(&[c], gb)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct GapTape {
    input_shape: Vec<usize>,
}

/// Global average pooling over each feature map.
pub fn gap<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, GapTape)> {
    let out = tensor::reduce_mean_spatial(input)?;
    Ok((
        out,
        GapTape {
            input_shape: input.shape().to_vec(),
        },
    ))
}

impl GapTape {
    /// Spreads each upstream entry uniformly: every cell receives `grad / (H*W)`.
    pub fn backward<T: Real>(&self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, k, h, w) = match *self.input_shape.as_slice() {
            [n, k, h, w] => (n, k, h, w),
            _ => return Err(Error::MissingTape),
        };
        if grad_out.shape() != [n, k] {
            return Err(Error::shape(format!(
                "gap backward: upstream {:?}, expected [{n}, {k}]",
                grad_out.shape()
            )));
        }
        let plane = h * w;
        let denom = T::from_f64(plane as f64);
        let mut out = Vec::with_capacity(n * k * plane);
        for &g in grad_out.data() {
            let v = g / denom;
            out.extend(std::iter::repeat_n(v, plane));
        }
        Tensor::from_vec(&self.input_shape, out)
    }
}

#[derive(Debug, Clone)]
pub struct ReluTape<T: Real> {
    input: Tensor<T>,
}

pub fn relu<T: Real>(input: &Tensor<T>) -> (Tensor<T>, ReluTape<T>) {
    (
        input.relu(),
        ReluTape {
            input: input.clone(),
        },
    )
}

impl<T: Real> ReluTape<T> {
    /// Passes the upstream gradient where the input was strictly positive; the
    /// subgradient at zero is zero.
    pub fn backward(&self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        if grad_out.shape() != self.input.shape() {
            return Err(Error::shape(format!(
                "relu backward: upstream {:?} vs input {:?}",
                grad_out.shape(),
                self.input.shape()
            )));
        }
        let data = self
            .input
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
            .collect();
        Tensor::from_vec(self.input.shape(), data)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTape<T: Real> {
    input: Tensor<T>,
    kernel: Tensor<T>,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T: Real> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, ConvTape<T>)> {
    let out = tensor::conv2d(input, kernel, bias, stride, pad)?;
    Ok((
        out,
        ConvTape {
            input: input.clone(),
            kernel: kernel.clone(),
            stride,
            pad,
        },
    ))
}

impl<T: Real> ConvTape<T> {
    pub fn backward(&self, grad_out: &Tensor<T>) -> Result<ConvGrads<T>> {
        let bias_shape = [self.kernel.shape()[0]];
        let g = ConvGeometry::new(
            &self.input,
            &self.kernel,
            &Tensor::zeros(&bias_shape)?,
            self.stride,
            self.pad,
        )?;
        if grad_out.shape() != [g.n, g.cout, g.oh, g.ow] {
            return Err(Error::shape(format!(
                "conv backward: upstream {:?}, expected {:?}",
                grad_out.shape(),
                [g.n, g.cout, g.oh, g.ow]
            )));
        }
        let x = self.input.data();
        let k = self.kernel.data();
        let gy = grad_out.data();
        let plane_in = g.h * g.w;
        let plane_out = g.oh * g.ow;
        let mut gx = vec![T::zero(); x.len()];
        let mut gk = vec![T::zero(); k.len()];
        let mut gb = vec![T::zero(); g.cout];
        for n in 0..g.n {
            for co in 0..g.cout {
                let o_base = (n * g.cout + co) * plane_out;
                let up = &gy[o_base..o_base + plane_out];
                let mut acc = T::zero();
                for &v in up {
                    acc += v;
                }
                gb[co] += acc;
                for ci in 0..g.cin {
                    let i_base = (n * g.cin + ci) * plane_in;
                    let src = &x[i_base..i_base + plane_in];
                    let dsrc = &mut gx[i_base..i_base + plane_in];
                    for ky in 0..g.kh {
                        let (oy0, oy1) = g.valid_range(ky, g.oh, g.h);
                        for kx in 0..g.kw {
                            let widx = ((co * g.cin + ci) * g.kh + ky) * g.kw + kx;
                            let wv = k[widx];
                            let (ox0, ox1) = g.valid_range(kx, g.ow, g.w);
                            let mut wacc = T::zero();
                            for oy in oy0..oy1 {
                                let iy = oy * g.stride + ky - g.pad;
                                let urow = &up[oy * g.ow..(oy + 1) * g.ow];
                                if g.stride == 1 {
                                    let ix0 = ox0 + kx - g.pad;
                                    let len = ox1 - ox0;
                                    let xrow = &src[iy * g.w + ix0..iy * g.w + ix0 + len];
                                    let drow = &mut dsrc[iy * g.w + ix0..iy * g.w + ix0 + len];
                                    for ((d, &u), &xv) in
                                        drow.iter_mut().zip(&urow[ox0..ox1]).zip(xrow)
                                    {
                                        *d += wv * u;
                                        wacc += u * xv;
                                    }
                                } else {
                                    for ox in ox0..ox1 {
                                        let ix = ox * g.stride + kx - g.pad;
                                        dsrc[iy * g.w + ix] += wv * urow[ox];
                                        wacc += urow[ox] * src[iy * g.w + ix];
                                    }
                                }
                            }
                            gk[widx] += wacc;
                        }
                    }
                }
            }
        }
        Ok(ConvGrads {
            input: Tensor::from_vec(self.input.shape(), gx)?,
            kernel: Tensor::from_vec(self.kernel.shape(), gk)?,
            bias: Tensor::from_vec(&bias_shape, gb)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct PoolTape {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

pub fn maxpool2d<T: Real>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, PoolTape)> {
    let (out, argmax) = tensor::maxpool2d(input, window, stride)?;
    Ok((
        out,
        PoolTape {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

impl PoolTape {
    /// Routes each upstream entry to the cell that won its window.
    pub fn backward<T: Real>(&self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        if grad_out.len() != self.argmax.len() {
            return Err(Error::shape(format!(
                "maxpool backward: upstream {:?} for {} windows",
                grad_out.shape(),
                self.argmax.len()
            )));
        }
        let mut out = Tensor::zeros(&self.input_shape)?;
        let d = out.data_mut();
        for (&idx, &g) in self.argmax.iter().zip(grad_out.data()) {
            d[idx] += g;
        }
        Ok(out)
    }
}

/// Batch loss plus per-sample class probabilities.
#[derive(Debug, Clone)]
pub struct LossValue<T: Real> {
    /// Mean cross-entropy over the batch.
    pub loss: T,
    pub per_sample: Vec<T>,
    /// Softmax probabilities, `[N, C]`.
    pub probs: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct SoftmaxCeTape<T: Real> {
    probs: Tensor<T>,
    labels: Vec<usize>,
}

/// Softmax followed by mean cross-entropy against integer labels.
pub fn softmax_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(LossValue<T>, SoftmaxCeTape<T>)> {
    let (n, c) = logits.dims2("softmax logits")?;
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::LabelOutOfRange { label, classes: c });
    }
    let mut probs = Vec::with_capacity(n * c);
    let mut per_sample = Vec::with_capacity(n);
    let mut total = T::zero();
    for (row, &label) in logits.data().chunks_exact(c).zip(labels) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for &z in row {
            denom += (z - max).exp();
        }
        let log_denom = denom.ln();
        for &z in row {
            probs.push((z - max).exp() / denom);
        }
        let loss = log_denom - (row[label] - max);
        per_sample.push(loss);
        total += loss;
    }
    let probs = Tensor::from_vec(&[n, c], probs)?;
    Ok((
        LossValue {
            loss: total / T::from_f64(n as f64),
            per_sample,
            probs: probs.clone(),
        },
        SoftmaxCeTape {
            probs,
            labels: labels.to_vec(),
        },
    ))
}

impl<T: Real> SoftmaxCeTape<T> {
    /// Gradient of `scale · loss` with respect to the logits: `scale · (p − onehot) / N`.
    pub fn backward(&self, scale: T) -> Result<Tensor<T>> {
        let (n, c) = self.probs.dims2("softmax probs")?;
        let factor = scale / T::from_f64(n as f64);
        let mut grad = self.probs.data().to_vec();
        for (i, &label) in self.labels.iter().enumerate() {
            grad[i * c + label] -= T::one();
        }
        for g in &mut grad {
            *g *= factor;
        }
        Tensor::from_vec(&[n, c], grad)
    }
}
