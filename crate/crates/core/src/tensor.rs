//! Dense tensors and the deterministic kernels the network is built from.
//!
//! Activations use the `[batch, channel, height, width]` layout. Every
//! reduction sums sequentially in row-major order of the reduced axes, so
//! identical inputs always produce bitwise-identical outputs.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Scalar storage type tag, matching the checkpoint dtype codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::UnknownDType(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Real scalar usable as tensor element: `f32` for training, `f64` for gradient checks.
pub trait Real:
    Float + Default + Debug + Display + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    const DTYPE: DType;

    fn from_f64(x: f64) -> Self;
    fn to_f64_lossless(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64_lossless(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64_lossless(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

/// Initial contents for [`Tensor::create`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fill {
    Zeros,
    Constant(f64),
    /// Uniform in `[lo, hi)`, drawn from a ChaCha8 stream seeded with `seed`.
    Uniform { seed: u64, lo: f64, hi: f64 },
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Real = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?}[", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::EmptyShape);
    }
    if shape.len() > 4 {
        return Err(Error::RankTooLarge(shape.len()));
    }
    if shape.contains(&0) {
        return Err(Error::ZeroExtent(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

/// Binary pointwise operation for [`Tensor::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Mul,
}

/// Either a tensor or a broadcast scalar operand.
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a, T: Real> {
    Tensor(&'a Tensor<T>),
    Scalar(T),
}

#[inline]
pub(crate) fn relu_scalar<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

impl<T: Real> Tensor<T> {
    pub fn create(shape: &[usize], fill: Fill) -> Result<Self> {
        let len = check_shape(shape)?;
        let data = match fill {
            Fill::Zeros => vec![T::zero(); len],
            Fill::Constant(c) => vec![T::from_f64(c); len],
            Fill::Uniform { seed, lo, hi } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..len)
                    .map(|_| T::from_f64(lo + (hi - lo) * rng.gen::<f64>()))
                    .collect()
            }
        };
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::create(shape, Fill::Zeros)
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds from `f64` values, rounding to `T`.
    pub fn from_f64s(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&x| T::from_f64(x)).collect())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data.clone())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64(x.to_f64_lossless()))
                .collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64_lossless()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Sequential sum in storage order.
    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &x in &self.data {
            acc += x;
        }
        acc
    }

    pub fn sum_squares(&self) -> T {
        let mut acc = T::zero();
        for &x in &self.data {
            acc += x * x;
        }
        acc
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64_lossless() - b.to_f64_lossless()).abs())
            .fold(0.0, f64::max)
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Self> {
        let n = self.shape[0];
        if start >= end || end > n {
            return Err(Error::shape(format!(
                "batch slice {start}..{end} out of range for {n}"
            )));
        }
        let per = self.len() / n;
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Self::from_vec(&shape, self.data[start * per..end * per].to_vec())
    }

    /// Gathers rows along the leading axis.
    pub fn gather_batch(&self, indices: &[usize]) -> Result<Self> {
        let n = self.shape[0];
        let per = self.len() / n;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            if i >= n {
                return Err(Error::shape(format!("row {i} out of range for {n}")));
            }
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self::from_vec(&shape, data)
    }

    /// Stacks equally shaped tensors along the leading axis.
    pub fn concat_batch(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("nothing to concatenate"))?;
        let tail = &first.shape[1..];
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::shape(format!(
                    "cannot concatenate {:?} with {:?}",
                    p.shape, first.shape
                )));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Self::from_vec(&shape, data)
    }

    pub fn elementwise(&self, op: ElementwiseOp, rhs: Operand<'_, T>) -> Result<Self> {
        let f = |a: T, b: T| match op {
            ElementwiseOp::Add => a + b,
            ElementwiseOp::Mul => a * b,
        };
        let data = match rhs {
            Operand::Scalar(b) => self.data.iter().map(|&a| f(a, b)).collect(),
            Operand::Tensor(other) => {
                if other.shape != self.shape {
                    return Err(Error::shape(format!(
                        "elementwise {:?} vs {:?}",
                        self.shape, other.shape
                    )));
                }
                self.data
                    .iter()
                    .zip(&other.data)
                    .map(|(&a, &b)| f(a, b))
                    .collect()
            }
        };
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        self.elementwise(ElementwiseOp::Add, Operand::Tensor(other))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Self> {
        self.elementwise(ElementwiseOp::Mul, Operand::Tensor(other))
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|x| x * factor)
    }

    /// `max(0, x)`; exact zeros and negative zeros map to `+0`.
    pub fn relu(&self) -> Self {
        self.map(relu_scalar)
    }

    pub(crate) fn dims4(&self, what: &str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(format!(
                "{what} expects rank 4, got {:?}",
                self.shape
            ))),
        }
    }

    pub(crate) fn dims2(&self, what: &str) -> Result<(usize, usize)> {
        match *self.shape.as_slice() {
            [a, b] => Ok((a, b)),
            _ => Err(Error::shape(format!(
                "{what} expects rank 2, got {:?}",
                self.shape
            ))),
        }
    }
}

/// Geometry shared by the forward and backward convolution kernels.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

fn out_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = extent + 2 * pad;
    if stride == 0 || padded < kernel || !(padded - kernel).is_multiple_of(stride) {
        return Err(Error::NonIntegralExtent {
            extent,
            pad,
            kernel,
            stride,
        });
    }
    Ok((padded - kernel) / stride + 1)
}

impl ConvGeometry {
    pub fn new<T: Real>(
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (n, cin, h, w) = input.dims4("conv2d input")?;
        let (cout, kcin, kh, kw) = kernel.dims4("conv2d kernel")?;
        if !matches!((kh, kw), (1, 1) | (3, 3) | (1, 3) | (3, 1)) {
            return Err(Error::UnsupportedKernel(kh, kw));
        }
        if kcin != cin {
            return Err(Error::ChannelMismatch {
                input: cin,
                kernel: kcin,
            });
        }
        if bias.shape() != [cout] {
            return Err(Error::shape(format!(
                "conv2d bias {:?} for {cout} output channels",
                bias.shape()
            )));
        }
        let oh = out_extent(h, kh, stride, pad)?;
        let ow = out_extent(w, kw, stride, pad)?;
        Ok(ConvGeometry {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    /// Output columns `ox` whose input column `ox*stride + kx - pad` lies inside the image.
    #[inline]
    pub fn valid_range(&self, k: usize, out: usize, extent: usize) -> (usize, usize) {
        // ix = o*stride + k - pad must satisfy 0 <= ix < extent
        let lo = if k >= self.pad {
            0
        } else {
            (self.pad - k).div_ceil(self.stride)
        };
        let hi = if extent + self.pad > k {
            ((extent + self.pad - k - 1) / self.stride + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// Cross-correlation with per-channel bias.
///
/// For each output cell the bias is added first, then contributions are
/// accumulated in `(cin, ky, kx)` order.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input, kernel, bias, stride, pad)?;
    let mut out = vec![T::zero(); g.n * g.cout * g.oh * g.ow];
    let x = input.data();
    let k = kernel.data();
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    for n in 0..g.n {
        for co in 0..g.cout {
            let o_base = (n * g.cout + co) * plane_out;
            let dst = &mut out[o_base..o_base + plane_out];
            dst.fill(bias.data()[co]);
            for ci in 0..g.cin {
                let i_base = (n * g.cin + ci) * plane_in;
                let src = &x[i_base..i_base + plane_in];
                for ky in 0..g.kh {
                    let (oy0, oy1) = g.valid_range(ky, g.oh, g.h);
                    for kx in 0..g.kw {
                        let wv = k[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                        let (ox0, ox1) = g.valid_range(kx, g.ow, g.w);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let row_out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                            let row_in = &src[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                let ix0 = ox0 + kx - g.pad;
                                let len = ox1 - ox0;
                                for (o, &i) in row_out[ox0..ox1]
                                    .iter_mut()
                                    .zip(&row_in[ix0..ix0 + len])
                                {
                                    *o += wv * i;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    row_out[ox] += wv * row_in[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[g.n, g.cout, g.oh, g.ow], out)
}

/// Max pooling with a square window. Returns the pooled tensor and, for each
/// output cell, the flat index into `input` of the winning cell. Ties go to the
/// first cell in row-major scan order of the window.
pub fn maxpool2d<T: Real>(
    input: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = input.dims4("maxpool2d input")?;
    if window == 0 || window > h || window > w {
        return Err(Error::WindowTooLarge {
            window,
            height: h,
            width: w,
        });
    }
    let oh = out_extent(h, window, stride, 0)?;
    let ow = out_extent(w, window, stride, 0)?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + oy * stride * w + ox * stride;
                let mut best = x[best_idx];
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + (oy * stride + dy) * w + ox * stride + dx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((Tensor::from_vec(&[n, c, oh, ow], out)?, argmax))
}

/// Global average pooling: `[N,K,H,W] -> [N,K]`, summing each map row-major
/// before dividing by `H*W`.
pub fn reduce_mean_spatial<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k, h, w) = input.dims4("reduce_mean_spatial input")?;
    let plane = h * w;
    let denom = T::from_f64(plane as f64);
    let data = input
        .data()
        .chunks_exact(plane)
        .map(|map| {
            let mut acc = T::zero();
            for &v in map {
                acc += v;
            }
            acc / denom
        })
        .collect();
    Tensor::from_vec(&[n, k], data)
}
