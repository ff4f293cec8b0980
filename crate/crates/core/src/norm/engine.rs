//! Forward and backward kernels shared by the tape ops and the tape-free API.
//!
//! Normalized value: `xhat = (x - mu_g) / sqrt(var_g + eps)`, output `gamma * xhat + beta`,
//! with biased (1/m) group variance and epsilon inside the square root only.

use super::GroupPartition;
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Per-`(n, c)` index into the flattened `[P, C]` gamma/beta, given the
/// parameter set each sample uses.
pub(crate) fn param_index(sample_sets: &[usize], channels: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(sample_sets.len() * channels);
    for &p in sample_sets {
        for c in 0..channels {
            idx.push(p * channels + c);
        }
    }
    idx
}

pub(crate) struct DynamicOut<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub stats: Vec<(f64, f64)>,
}

pub(crate) fn dynamic_forward<T: Real>(
    x: &[T],
    partition: &GroupPartition,
    pidx: &[usize],
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> Result<DynamicOut<T>> {
    let stats = crate::tensor::group_stats_f64(x, partition)?;
    let mean: Vec<T> = stats.iter().map(|s| T::lit(s.0)).collect();
    let inv_std: Vec<T> = stats.iter().map(|s| T::lit(1.0 / (s.1 + eps).sqrt())).collect();
    let [n, h, w, c] = partition.shape();
    let table = partition.nc_table();
    let hw = h * w;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for ni in 0..n {
        let groups = &table[ni * c..(ni + 1) * c];
        let params = &pidx[ni * c..(ni + 1) * c];
        for p in 0..hw {
            let off = (ni * hw + p) * c;
            for ci in 0..c {
                let g = groups[ci];
                let pi = params[ci];
                let xh = (x[off + ci] - mean[g]) * inv_std[g];
                xhat[off + ci] = xh;
                y[off + ci] = gamma[pi] * xh + beta[pi];
            }
        }
    }
    Ok(DynamicOut { y, xhat, inv_std, stats })
}

pub(crate) struct NormGrads<T> {
    pub dx: Vec<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
}

pub(crate) fn affine_grads<T: Real>(
    dy: &[T],
    xhat: &[T],
    pidx: &[usize],
    shape: [usize; 4],
    n_params: usize,
) -> (Vec<T>, Vec<T>) {
    let [n, h, w, c] = shape;
    let hw = h * w;
    let mut dgamma = vec![0.0f64; n_params];
    let mut dbeta = vec![0.0f64; n_params];
    for ni in 0..n {
        let params = &pidx[ni * c..(ni + 1) * c];
        for p in 0..hw {
            let off = (ni * hw + p) * c;
            for ci in 0..c {
                let d = dy[off + ci].f64();
                dgamma[params[ci]] += d * xhat[off + ci].f64();
                dbeta[params[ci]] += d;
            }
        }
    }
    (dgamma.into_iter().map(T::lit).collect(), dbeta.into_iter().map(T::lit).collect())
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dynamic_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    partition: &GroupPartition,
    pidx: &[usize],
    gamma: &[T],
) -> NormGrads<T> {
    let [n, h, w, c] = partition.shape();
    let hw = h * w;
    let table = partition.nc_table();
    let sizes = partition.group_sizes();
    let groups = partition.group_count();
    let mut sum_g = vec![0.0f64; groups];
    let mut sum_gx = vec![0.0f64; groups];
    for ni in 0..n {
        let gs = &table[ni * c..(ni + 1) * c];
        let params = &pidx[ni * c..(ni + 1) * c];
        for p in 0..hw {
            let off = (ni * hw + p) * c;
            for ci in 0..c {
                let gi = (dy[off + ci] * gamma[params[ci]]).f64();
                sum_g[gs[ci]] += gi;
                sum_gx[gs[ci]] += gi * xhat[off + ci].f64();
            }
        }
    }
    let mean_g: Vec<T> = sum_g.iter().zip(&sizes).map(|(s, &m)| T::lit(s / m as f64)).collect();
    let mean_gx: Vec<T> = sum_gx.iter().zip(&sizes).map(|(s, &m)| T::lit(s / m as f64)).collect();
    let mut dx = vec![T::zero(); dy.len()];
    for ni in 0..n {
        let gs = &table[ni * c..(ni + 1) * c];
        let params = &pidx[ni * c..(ni + 1) * c];
        for p in 0..hw {
            let off = (ni * hw + p) * c;
            for ci in 0..c {
                let g = gs[ci];
                let gi = dy[off + ci] * gamma[params[ci]];
                dx[off + ci] = inv_std[g] * (gi - mean_g[g] - xhat[off + ci] * mean_gx[g]);
            }
        }
    }
    let (dgamma, dbeta) = affine_grads(dy, xhat, pidx, partition.shape(), gamma.len());
    NormGrads { dx, dgamma, dbeta }
}

/// Normalization with fixed per-channel statistics.
pub(crate) fn frozen_forward<T: Real>(
    x: &[T],
    shape: [usize; 4],
    mean: &[T],
    var: &[T],
    pidx: &[usize],
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [n, h, w, c] = shape;
    let inv_std: Vec<T> = var.iter().map(|&v| T::lit(1.0 / (v.f64() + eps).sqrt())).collect();
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for ni in 0..n {
        let params = &pidx[ni * c..(ni + 1) * c];
        for p in 0..h * w {
            let off = (ni * h * w + p) * c;
            for ci in 0..c {
                let xh = (x[off + ci] - mean[ci]) * inv_std[ci];
                xhat[off + ci] = xh;
                y[off + ci] = gamma[params[ci]] * xh + beta[params[ci]];
            }
        }
    }
    (y, xhat, inv_std)
}

pub(crate) fn frozen_backward<T: Real>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    shape: [usize; 4],
    pidx: &[usize],
    gamma: &[T],
) -> NormGrads<T> {
    let c = shape[3];
    let mut dx = vec![T::zero(); dy.len()];
    for (i, d) in dx.iter_mut().enumerate() {
        let nc = (i / (shape[1] * shape[2] * c)) * c + i % c;
        *d = dy[i] * gamma[pidx[nc]] * inv_std[i % c];
    }
    let (dgamma, dbeta) = affine_grads(dy, xhat, pidx, shape, gamma.len());
    NormGrads { dx, dgamma, dbeta }
}

/// Softmax over a small logit vector.
pub(crate) fn simplex(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Gradient w.r.t. logits given gradient w.r.t. `simplex(logits)`.
pub(crate) fn simplex_backward(weights: &[f64], dweights: &[f64]) -> Vec<f64> {
    let dot: f64 = weights.iter().zip(dweights).map(|(w, d)| w * d).sum();
    weights.iter().zip(dweights).map(|(w, d)| w * (d - dot)).collect()
}

/// One statistic source mixed by SwitchNorm.
pub(crate) struct SwitchComponent {
    pub partition: GroupPartition,
    pub stats: Vec<(f64, f64)>,
    /// Frozen components take their statistics from running averages and pass no
    /// gradient to the input.
    pub frozen: bool,
}

pub(crate) struct SwitchOut<T> {
    pub y: Vec<T>,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Mixes per-(n, c) mean and variance from each component, then normalizes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn switch_forward<T: Real>(
    x: &[T],
    shape: [usize; 4],
    comps: &[SwitchComponent],
    wm: &[f64],
    wv: &[f64],
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> Result<SwitchOut<T>> {
    if comps.len() != wm.len() || comps.len() != wv.len() {
        return Err(Error::invalid("switch weights must match the number of components"));
    }
    for w in [wm, wv] {
        let total: f64 = w.iter().sum();
        if w.iter().any(|&v| v < 0.0 || !v.is_finite()) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("switch weights {w:?} are not on the simplex")));
        }
    }
    let [n, h, w, c] = shape;
    let mut mixed_mean = vec![0.0f64; n * c];
    let mut mixed_var = vec![0.0f64; n * c];
    for (k, comp) in comps.iter().enumerate() {
        let table = comp.partition.nc_table();
        for nc in 0..n * c {
            let (m, v) = comp.stats[table[nc]];
            mixed_mean[nc] += wm[k] * m;
            mixed_var[nc] += wv[k] * v;
        }
    }
    let inv_std: Vec<f64> = mixed_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let hw = h * w;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![0.0f64; x.len()];
    for ni in 0..n {
        for p in 0..hw {
            let off = (ni * hw + p) * c;
            for ci in 0..c {
                let nc = ni * c + ci;
                let xh = (x[off + ci].f64() - mixed_mean[nc]) * inv_std[nc];
                xhat[off + ci] = xh;
                y[off + ci] = gamma[ci] * T::lit(xh) + beta[ci];
            }
        }
    }
    Ok(SwitchOut { y, xhat, inv_std })
}

pub(crate) struct SwitchGrads<T> {
    pub dx: Vec<T>,
    pub dgamma: Vec<T>,
    pub dbeta: Vec<T>,
    pub dwm: Vec<f64>,
    pub dwv: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn switch_backward<T: Real>(
    dy: &[T],
    x: &[T],
    shape: [usize; 4],
    comps: &[SwitchComponent],
    wm: &[f64],
    wv: &[f64],
    out: &SwitchOut<T>,
    gamma: &[T],
) -> SwitchGrads<T> {
    let [n, h, w, c] = shape;
    let hw = h * w;
    // dL/dmu and dL/dvar at each (n, c).
    let mut dmu = vec![0.0f64; n * c];
    let mut dvar = vec![0.0f64; n * c];
    let mut dx = vec![0.0f64; x.len()];
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for ni in 0..n {
        for p in 0..hw {
            let off = (ni * hw + p) * c;
            for ci in 0..c {
                let nc = ni * c + ci;
                let d = dy[off + ci].f64();
                let g = d * gamma[ci].f64();
                let inv = out.inv_std[nc];
                dx[off + ci] = g * inv;
                dmu[nc] -= g * inv;
                dvar[nc] -= 0.5 * g * out.xhat[off + ci] * inv * inv;
                dgamma[ci] += d * out.xhat[off + ci];
                dbeta[ci] += d;
            }
        }
    }
    let mut dwm = vec![0.0f64; comps.len()];
    let mut dwv = vec![0.0f64; comps.len()];
    for (k, comp) in comps.iter().enumerate() {
        let table = comp.partition.nc_table();
        let groups = comp.partition.group_count();
        let sizes = comp.partition.group_sizes();
        let mut dm = vec![0.0f64; groups];
        let mut dv = vec![0.0f64; groups];
        for nc in 0..n * c {
            let g = table[nc];
            let (m, v) = comp.stats[g];
            dwm[k] += dmu[nc] * m;
            dwv[k] += dvar[nc] * v;
            dm[g] += wm[k] * dmu[nc];
            dv[g] += wv[k] * dvar[nc];
        }
        if comp.frozen {
            continue;
        }
        for ni in 0..n {
            for p in 0..hw {
                let off = (ni * hw + p) * c;
                for ci in 0..c {
                    let g = table[ni * c + ci];
                    let m = sizes[g] as f64;
                    let xm = x[off + ci].f64() - comp.stats[g].0;
                    dx[off + ci] += dm[g] / m + dv[g] * 2.0 * xm / m;
                }
            }
        }
    }
    SwitchGrads {
        dx: dx.into_iter().map(T::lit).collect(),
        dgamma: dgamma.into_iter().map(T::lit).collect(),
        dbeta: dbeta.into_iter().map(T::lit).collect(),
        dwm,
        dwv,
    }
}
