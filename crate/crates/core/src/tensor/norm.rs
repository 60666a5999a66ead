//! Batch and group normalization kernels over `[N, C, spatial...]` layouts.

use super::{Buffer, Scalar};

pub(crate) struct NormForward<T> {
    pub out: Buffer<T>,
    pub x_hat: Buffer<T>,
    /// One entry per normalization group (per channel for batch norm,
    /// per `(sample, group)` for group norm).
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    /// Unbiased variance per group, used for running statistics.
    pub var_unbiased: Vec<T>,
}

pub(crate) fn batch_norm_train<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    spatial: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> NormForward<T> {
    let m = n * spatial;
    let mf = T::from_f64(m as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut acc = T::zero();
        for s in 0..n {
            let base = (s * c + ch) * spatial;
            acc += x[base..base + spatial].iter().copied().sum::<T>();
        }
        mean[ch] = acc / mf;
        let mut sq = T::zero();
        for s in 0..n {
            let base = (s * c + ch) * spatial;
            for &v in &x[base..base + spatial] {
                let d = v - mean[ch];
                sq += d * d;
            }
        }
        var[ch] = sq / mf;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut out = Buffer::zeros(x.len());
    let mut x_hat = Buffer::zeros(x.len());
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * spatial;
            for i in base..base + spatial {
                let h = (x[i] - mean[ch]) * inv_std[ch];
                x_hat[i] = h;
                out[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    let unbias = if m > 1 { mf / T::from_f64((m - 1) as f64) } else { T::one() };
    let var_unbiased = var.iter().map(|&v| v * unbias).collect();
    NormForward {
        out,
        x_hat,
        inv_std,
        mean,
        var_unbiased,
    }
}

/// Affine normalization with fixed statistics (batch norm in eval mode).
pub(crate) fn batch_norm_eval<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    spatial: usize,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> NormForward<T> {
    let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut out = Buffer::zeros(x.len());
    let mut x_hat = Buffer::zeros(x.len());
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * spatial;
            for i in base..base + spatial {
                let h = (x[i] - running_mean[ch]) * inv_std[ch];
                x_hat[i] = h;
                out[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    NormForward {
        out,
        x_hat,
        inv_std,
        mean: running_mean.to_vec(),
        var_unbiased: running_var.to_vec(),
    }
}

/// Returns `(dx, dgamma, dbeta)`. With `batch_stats` false the statistics
/// are treated as constants.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_norm_backward<T: Scalar>(
    g: &[T],
    x_hat: &[T],
    inv_std: &[T],
    gamma: &[T],
    n: usize,
    c: usize,
    spatial: usize,
    batch_stats: bool,
) -> (Buffer<T>, Vec<T>, Vec<T>) {
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * spatial;
            for i in base..base + spatial {
                dgamma[ch] += g[i] * x_hat[i];
                dbeta[ch] += g[i];
            }
        }
    }
    let mf = T::from_f64((n * spatial) as f64);
    let mut dx = Buffer::zeros(g.len());
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * spatial;
            let k = gamma[ch] * inv_std[ch];
            for i in base..base + spatial {
                dx[i] = if batch_stats {
                    k / mf * (mf * g[i] - dbeta[ch] - x_hat[i] * dgamma[ch])
                } else {
                    k * g[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn group_norm_forward<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    spatial: usize,
    groups: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> NormForward<T> {
    let cpg = c / groups;
    let len = cpg * spatial;
    let mf = T::from_f64(len as f64);
    let mut mean = Vec::with_capacity(n * groups);
    let mut inv_std = Vec::with_capacity(n * groups);
    let mut var_unbiased = Vec::with_capacity(n * groups);
    let mut out = Buffer::zeros(x.len());
    let mut x_hat = Buffer::zeros(x.len());
    for s in 0..n {
        for grp in 0..groups {
            let base = (s * c + grp * cpg) * spatial;
            let block = &x[base..base + len];
            let mu = block.iter().copied().sum::<T>() / mf;
            let var = block.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / mf;
            let is = T::one() / (var + eps).sqrt();
            for (j, &v) in block.iter().enumerate() {
                let ch = grp * cpg + j / spatial;
                let h = (v - mu) * is;
                x_hat[base + j] = h;
                out[base + j] = gamma[ch] * h + beta[ch];
            }
            mean.push(mu);
            inv_std.push(is);
            var_unbiased.push(if len > 1 { var * mf / T::from_f64((len - 1) as f64) } else { var });
        }
    }
    NormForward {
        out,
        x_hat,
        inv_std,
        mean,
        var_unbiased,
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn group_norm_backward<T: Scalar>(
    g: &[T],
    x_hat: &[T],
    inv_std: &[T],
    gamma: &[T],
    n: usize,
    c: usize,
    spatial: usize,
    groups: usize,
) -> (Buffer<T>, Vec<T>, Vec<T>) {
    let cpg = c / groups;
    let len = cpg * spatial;
    let mf = T::from_f64(len as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = Buffer::zeros(g.len());
    for s in 0..n {
        for grp in 0..groups {
            let base = (s * c + grp * cpg) * spatial;
            let mut sum_d = T::zero();
            let mut sum_dh = T::zero();
            for j in 0..len {
                let ch = grp * cpg + j / spatial;
                let i = base + j;
                dgamma[ch] += g[i] * x_hat[i];
                dbeta[ch] += g[i];
                let d = g[i] * gamma[ch];
                sum_d += d;
                sum_dh += d * x_hat[i];
            }
            let is = inv_std[s * groups + grp];
            for j in 0..len {
                let ch = grp * cpg + j / spatial;
                let i = base + j;
                let d = g[i] * gamma[ch];
                dx[i] = is / mf * (mf * d - sum_d - x_hat[i] * sum_dh);
            }
        }
    }
    (dx, dgamma, dbeta)
}
