//! Tape-free forward kernels and the backward helpers the tape reuses.

use serde::{Deserialize, Serialize};

use super::{as_nhwc, Real, Tensor};
use crate::error::{Error, Result};
use crate::norm::GroupPartition;

/// Row-major GEMM: `c = a' * b' + beta * c` where `'` optionally transposes.
/// `a'` is `m x k`, `b'` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    beta: T,
) {
    assert_eq!(a.len(), m * k, "gemm lhs");
    assert_eq!(b.len(), k * n, "gemm rhs");
    assert_eq!(c.len(), m * n, "gemm out");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths asserted above match the strides; `c` is a distinct &mut borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// `[m, k] x [k, n] -> [m, n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    };
    if k != k2 {
        return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, T::zero());
    Tensor::new(&[m, n], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Output extent and leading pad for one spatial axis.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => {
            if input < kernel {
                (0, 0)
            } else {
                ((input - kernel) / stride + 1, 0)
            }
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out.saturating_sub(1)) * stride + kernel).saturating_sub(input);
            (out, total / 2)
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.n * self.oh * self.ow
    }

    pub fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    pub fn new(x: &[usize], k: &[usize], bias: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        let &[n, h, w, cin] = x else {
            return Err(Error::shape("conv2d", format!("input must be [N,H,W,C], got {x:?}")));
        };
        let &[kh, kw, kc, cout] = k else {
            return Err(Error::shape("conv2d", format!("kernel must be [KH,KW,Cin,Cout], got {k:?}")));
        };
        if kc != cin {
            return Err(Error::shape("conv2d", format!("input channels {cin} vs kernel channels {kc}")));
        }
        if bias != [cout] {
            return Err(Error::shape("conv2d", format!("bias {bias:?} vs {cout} output channels")));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be >= 1"));
        }
        let (oh, pad_h) = conv_output_extent(h, kh, stride, padding);
        let (ow, pad_w) = conv_output_extent(w, kw, stride, padding);
        Ok(ConvGeom { n, h, w, cin, kh, kw, cout, oh, ow, pad_h, pad_w, stride })
    }
}

pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.rows() * patch];
    for n in 0..g.n {
        for oh in 0..g.oh {
            for ow in 0..g.ow {
                let row = ((n * g.oh + oh) * g.ow + ow) * patch;
                for kh in 0..g.kh {
                    let ih = (oh * g.stride + kh) as isize - g.pad_h as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    for kw in 0..g.kw {
                        let iw = (ow * g.stride + kw) as isize - g.pad_w as isize;
                        if iw < 0 || iw >= g.w as isize {
                            continue;
                        }
                        let src = ((n * g.h + ih as usize) * g.w + iw as usize) * g.cin;
                        let dst = row + (kh * g.kw + kw) * g.cin;
                        cols[dst..dst + g.cin].copy_from_slice(&x[src..src + g.cin]);
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut dx = vec![T::zero(); g.n * g.h * g.w * g.cin];
    for n in 0..g.n {
        for oh in 0..g.oh {
            for ow in 0..g.ow {
                let row = ((n * g.oh + oh) * g.ow + ow) * patch;
                for kh in 0..g.kh {
                    let ih = (oh * g.stride + kh) as isize - g.pad_h as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    for kw in 0..g.kw {
                        let iw = (ow * g.stride + kw) as isize - g.pad_w as isize;
                        if iw < 0 || iw >= g.w as isize {
                            continue;
                        }
                        let dst = ((n * g.h + ih as usize) * g.w + iw as usize) * g.cin;
                        let src = row + (kh * g.kw + kw) * g.cin;
                        for c in 0..g.cin {
                            dx[dst + c] += cols[src + c];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Returns the output and the im2col buffer (kept by the tape for the backward pass).
pub(crate) fn conv2d_with_cols<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<T>, Vec<T>, ConvGeom)> {
    let g = ConvGeom::new(x.shape(), w.shape(), b.shape(), stride, padding)?;
    let cols = im2col(x.data(), &g);
    let rows = g.rows();
    let mut out = Vec::with_capacity(rows * g.cout);
    for _ in 0..rows {
        out.extend_from_slice(b.data());
    }
    gemm(rows, g.patch(), g.cout, &cols, false, w.data(), false, &mut out, T::one());
    Ok((Tensor::new(&[g.n, g.oh, g.ow, g.cout], out)?, cols, g))
}

/// Cross-correlation of an `[N,H,W,Cin]` input with a `[KH,KW,Cin,Cout]` kernel.
pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    conv2d_with_cols(x, w, b, stride, padding).map(|(out, _, _)| out)
}

/// 2x2 max pooling with stride 2 (trailing odd rows/columns are dropped).
/// Also returns, per output element, the flat input index that won.
pub fn max_pool2<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let &[n, h, w, c] = x.shape() else {
        return Err(Error::shape("max_pool2", format!("expected [N,H,W,C], got {:?}", x.shape())));
    };
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * oh * ow * c);
    let mut arg = Vec::with_capacity(n * oh * ow * c);
    for ni in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for ci in 0..c {
                    let mut best = usize::MAX;
                    let mut best_v = T::neg_infinity();
                    for di in 0..2 {
                        for dj in 0..2 {
                            let idx = ((ni * h + 2 * i + di) * w + 2 * j + dj) * c + ci;
                            if best == usize::MAX || xd[idx] > best_v {
                                best = idx;
                                best_v = xd[idx];
                            }
                        }
                    }
                    out.push(best_v);
                    arg.push(best);
                }
            }
        }
    }
    Ok((Tensor::new(&[n, oh, ow, c], out)?, arg))
}

/// Rotates every image of an `[N,H,W,C]` tensor by `k` quarter turns counter-clockwise
/// in the (H, W) plane. The output has shape `[N,W,H,C]` for odd `k`.
pub fn rot90<T: Real>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let &[n, h, w, c] = x.shape() else {
        return Err(Error::shape("rot90", format!("expected [N,H,W,C], got {:?}", x.shape())));
    };
    let k = k % 4;
    let (oh, ow) = if k % 2 == 1 { (w, h) } else { (h, w) };
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for ni in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                let (si, sj) = match k {
                    0 => (i, j),
                    1 => (j, w - 1 - i),
                    2 => (h - 1 - i, w - 1 - j),
                    _ => (h - 1 - j, i),
                };
                let src = ((ni * h + si) * w + sj) * c;
                let dst = ((ni * oh + i) * ow + j) * c;
                out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
            }
        }
    }
    Tensor::new(&[n, oh, ow, c], out)
}

/// Row-wise softmax of an `[N, M]` tensor.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, m] = x.shape() else {
        return Err(Error::shape("softmax", format!("expected [N, M], got {:?}", x.shape())));
    };
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(m.max(1)).take(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(&[n, m], out)
}

pub(crate) fn check_labels(labels: &[usize], n: usize, m: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::shape("cross_entropy", format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
        return Err(Error::invalid(format!("label {bad} outside {m} classes")));
    }
    Ok(())
}

/// Mean negative log-likelihood of `labels` under row-probabilities `probs`.
pub fn cross_entropy<T: Real>(probs: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let &[n, m] = probs.shape() else {
        return Err(Error::shape("cross_entropy", format!("expected [N, M], got {:?}", probs.shape())));
    };
    check_labels(labels, n, m)?;
    let total: T = labels.iter().enumerate().map(|(i, &l)| -probs.data()[i * m + l].ln()).sum();
    Ok(total / T::lit(n as f64))
}

/// Per-group `(mean, biased variance)` of `x` under `partition`.
pub fn reduce_mean_var<T: Real>(x: &Tensor<T>, partition: &GroupPartition) -> Result<Vec<(T, T)>> {
    let shape = as_nhwc(x.shape())?;
    if shape != partition.shape() {
        return Err(Error::shape(
            "reduce_mean_var",
            format!("tensor {:?} vs partition {:?}", x.shape(), partition.shape()),
        ));
    }
    let stats = group_stats_f64(x.data(), partition)?;
    Ok(stats.into_iter().map(|(m, v)| (T::lit(m), T::lit(v))).collect())
}

/// Two-pass group statistics accumulated in f64.
pub(crate) fn group_stats_f64<T: Real>(x: &[T], partition: &GroupPartition) -> Result<Vec<(f64, f64)>> {
    let [n, h, w, c] = partition.shape();
    let groups = partition.group_count();
    let sizes = partition.group_sizes();
    if let Some(k) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::DegenerateGroup(format!("group {k} of {:?} is empty", partition.kind())));
    }
    let table = partition.nc_table();
    let hw = h * w;
    let mut sum = vec![0.0f64; groups];
    for ni in 0..n {
        let base = ni * hw * c;
        let row = &table[ni * c..(ni + 1) * c];
        for p in 0..hw {
            let px = &x[base + p * c..base + (p + 1) * c];
            for (ci, &v) in px.iter().enumerate() {
                sum[row[ci]] += v.f64();
            }
        }
    }
    let mean: Vec<f64> = sum.iter().zip(&sizes).map(|(s, &m)| s / m as f64).collect();
    let mut sq = vec![0.0f64; groups];
    for ni in 0..n {
        let base = ni * hw * c;
        let row = &table[ni * c..(ni + 1) * c];
        for p in 0..hw {
            let px = &x[base + p * c..base + (p + 1) * c];
            for (ci, &v) in px.iter().enumerate() {
                let g = row[ci];
                let d = v.f64() - mean[g];
                sq[g] += d * d;
            }
        }
    }
    Ok(mean
        .into_iter()
        .zip(sq)
        .zip(sizes)
        .map(|((m, s), size)| (m, s / size as f64))
        .collect())
}
