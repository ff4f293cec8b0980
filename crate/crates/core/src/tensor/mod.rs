//! Dense tensors, deterministic RNG, primitive kernels and the reverse-mode tape.

mod kernels;
mod rng;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use kernels::{
    conv2d_forward, conv_output_extent, cross_entropy, matmul, max_pool2, reduce_mean_var, rot90,
    softmax_rows, Padding,
};
pub(crate) use kernels::group_stats_f64;
pub use rng::Rng;
pub use tape::{Gradients, Tape, Var};
pub(crate) use tape::switch_components;

/// On-disk element encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point element type. Implemented for `f32` (training) and `f64` (tests).
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const DTYPE: DType;

    /// `c = alpha * a * b + beta * c` on row/column-strided operands.
    ///
    /// # Safety
    /// The pointers and strides must describe valid `m x k`, `k x n` and `m x n`
    /// matrices, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite float converts to f64")
    }
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Dense row-major tensor. Image tensors are `[N, H, W, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} holds {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..numel).map(&mut f).collect() }
    }

    /// Standard-normal entries.
    pub fn randn(shape: &[usize], rng: &mut Rng) -> Self {
        Self::from_fn(shape, |_| T::lit(rng.normal()))
    }

    /// Uniform entries in `[lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        Self::from_fn(shape, |_| T::lit(rng.uniform(lo, hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::shape("item", format!("expected one element, shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn into_reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Interprets the tensor as `[N, H, W, C]`; rank-2 `[N, D]` maps to `[N, 1, 1, D]`.
    pub fn nhwc(&self) -> Result<[usize; 4]> {
        as_nhwc(&self.shape)
    }

    pub fn map(&self, mut f: impl FnMut(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().f64())
            .fold(0.0, f64::max))
    }

    /// Element at `[n, h, w, c]` of a rank-4 tensor.
    pub fn at4(&self, n: usize, h: usize, w: usize, c: usize) -> T {
        let [_, hh, ww, cc] = [self.shape[0], self.shape[1], self.shape[2], self.shape[3]];
        self.data[((n * hh + h) * ww + w) * cc + c]
    }

    /// Copies samples `[start, start + count)` along the leading axis.
    pub fn slice_batch(&self, start: usize, count: usize) -> Result<Self> {
        let n = *self.shape.first().ok_or_else(|| Error::shape("slice_batch", "scalar tensor"))?;
        if start + count > n {
            return Err(Error::shape("slice_batch", format!("{start}+{count} exceeds batch {n}")));
        }
        let per = self.data.len() / n.max(1);
        let mut shape = self.shape.clone();
        shape[0] = count;
        Ok(Tensor { shape, data: self.data[start * per..(start + count) * per].to_vec() })
    }

    /// Gathers samples along the leading axis.
    pub fn gather_batch(&self, indices: &[usize]) -> Result<Self> {
        let n = *self.shape.first().ok_or_else(|| Error::shape("gather_batch", "scalar tensor"))?;
        let per = self.data.len() / n.max(1);
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            if i >= n {
                return Err(Error::shape("gather_batch", format!("index {i} out of batch {n}")));
            }
            data.extend_from_slice(&self.data[i * per..(i + 1) * per]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Tensor { shape, data })
    }

    /// Concatenates tensors along the leading axis.
    pub fn concat_batch(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat_batch of nothing"))?;
        let tail = &first.shape[1..];
        let mut n = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::shape("concat_batch", format!("{:?} vs {:?}", p.shape, first.shape)));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = n;
        Ok(Tensor { shape, data })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.f64()).unwrap_or_else(U::nan)).collect(),
        }
    }
}

pub(crate) fn as_nhwc(shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [n, h, w, c] => Ok([n, h, w, c]),
        [n, d] => Ok([n, 1, 1, d]),
        _ => Err(Error::shape("nhwc", format!("expected rank 2 or 4, got {shape:?}"))),
    }
}
