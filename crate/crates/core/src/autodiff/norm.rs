//! Per-channel batch normalization over `(N, H, W)`.

use crate::tensor::{Result, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchNormMode {
    /// Normalize with batch statistics and update the running averages.
    Train,
    /// Normalize with the running averages.
    Eval,
}

/// Non-trainable running statistics of one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    /// Mean 0, variance 1.
    pub fn fresh(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormParams<T> {
    pub eps: T,
    pub momentum: T,
}

/// Saved context for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct BatchNormCtx<T> {
    pub mode: BatchNormMode,
    /// Normalized input (before the affine map).
    pub xhat: Vec<T>,
    /// `1 / sqrt(var + eps)` per channel.
    pub inv_std: Vec<T>,
}

fn check<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, stats: &RunningStats<T>) -> Result<usize> {
    let (_, c, _, _) = x.dims4("batchnorm2d")?;
    for (what, len) in [
        ("gamma", gamma.len()),
        ("beta", beta.len()),
        ("running mean", stats.mean.len()),
        ("running var", stats.var.len()),
    ] {
        if len != c {
            return Err(TensorError::Channels {
                op: what,
                got: len,
                expected: c,
            });
        }
    }
    Ok(c)
}

pub(crate) fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: &mut RunningStats<T>,
    mode: BatchNormMode,
    p: BatchNormParams<T>,
) -> Result<(Tensor<T>, BatchNormCtx<T>)> {
    let c = check(x, gamma, beta, stats)?;
    let (n, _, h, w) = x.dims4("batchnorm2d")?;
    let plane = h * w;
    let count = T::from_usize(n * plane).expect("count fits");
    let channel = |ch: usize| {
        (0..n).flat_map(move |b| {
            let base = (b * c + ch) * plane;
            base..base + plane
        })
    };

    let (mean, var) = match mode {
        BatchNormMode::Train => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let m = channel(ch).fold(T::zero(), |a, i| a + x.data()[i]) / count;
                let v = channel(ch).fold(T::zero(), |a, i| {
                    let d = x.data()[i] - m;
                    a + d * d
                }) / count;
                mean[ch] = m;
                var[ch] = v;
            }
            let keep = T::one() - p.momentum;
            for ch in 0..c {
                stats.mean[ch] = keep * stats.mean[ch] + p.momentum * mean[ch];
                stats.var[ch] = keep * stats.var[ch] + p.momentum * var[ch];
            }
            (mean, var)
        }
        BatchNormMode::Eval => (stats.mean.clone(), stats.var.clone()),
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + p.eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for ch in 0..c {
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        for i in channel(ch) {
            let xh = (x.data()[i] - mean[ch]) * inv_std[ch];
            xhat[i] = xh;
            out[i] = g * xh + b;
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), out)?,
        BatchNormCtx { mode, xhat, inv_std },
    ))
}

pub(crate) fn batchnorm_backward<T: Scalar>(
    shape: &[usize],
    gamma: &Tensor<T>,
    ctx: &BatchNormCtx<T>,
    dy: &[T],
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let count = T::from_usize(n * plane).expect("count fits");
    let channel = |ch: usize| {
        (0..n).flat_map(move |b| {
            let base = (b * c + ch) * plane;
            base..base + plane
        })
    };
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xhat = vec![T::zero(); c];
    for ch in 0..c {
        for i in channel(ch) {
            sum_dy[ch] = sum_dy[ch] + dy[i];
            sum_dy_xhat[ch] = sum_dy_xhat[ch] + dy[i] * ctx.xhat[i];
        }
    }
    if let Some(dg) = dgamma {
        for ch in 0..c {
            dg[ch] = dg[ch] + sum_dy_xhat[ch];
        }
    }
    if let Some(db) = dbeta {
        for ch in 0..c {
            db[ch] = db[ch] + sum_dy[ch];
        }
    }
    let Some(dx) = dx else { return };
    for ch in 0..c {
        let g = gamma.data()[ch];
        let inv = ctx.inv_std[ch];
        match ctx.mode {
            BatchNormMode::Eval => {
                for i in channel(ch) {
                    dx[i] = dx[i] + dy[i] * g * inv;
                }
            }
            BatchNormMode::Train => {
                // dx = g * inv / M * (M dy - sum(dy) - xhat * sum(dy * xhat))
                let scale = g * inv / count;
                for i in channel(ch) {
                    let t = count * dy[i] - sum_dy[ch] - ctx.xhat[i] * sum_dy_xhat[ch];
                    dx[i] = dx[i] + scale * t;
                }
            }
        }
    }
}
