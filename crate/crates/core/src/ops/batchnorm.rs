//! Per-channel batch normalization.

use crate::tensor::{Element, Tensor, TensorError};

use super::conv::BatchNormParams;

/// Added to the variance before the square root.
pub const BN_EPSILON: f64 = 1e-6;

/// Weight of the previous value in the rolling-statistics update.
pub const ROLLING_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Inference,
    Training,
}

/// Values saved by the training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    /// Normalized input before gamma/beta.
    pub x_hat: Tensor<T>,
    pub mean: Vec<T>,
    /// Population variance over `N * H * W`.
    pub var: Vec<T>,
}

fn check_len<T>(name: &str, v: &[T], channels: usize) -> Result<(), TensorError> {
    if v.len() == channels {
        Ok(())
    } else {
        Err(TensorError::mismatch(format!("{channels} {name} entries"), v.len()))
    }
}

/// `y = gamma (x - mean) / sqrt(var + eps) + beta` with the rolling statistics.
pub fn batchnorm_inference<T: Element>(
    x: &Tensor<T>,
    bn: &BatchNormParams<T>,
    beta: &[T],
    epsilon: T,
) -> Result<Tensor<T>, TensorError> {
    let s = x.shape();
    check_len("gamma", &bn.gamma, s.c)?;
    check_len("mean", &bn.rolling_mean, s.c)?;
    check_len("variance", &bn.rolling_var, s.c)?;
    check_len("beta", beta, s.c)?;
    if let Some((channel, v)) = bn.rolling_var.iter().enumerate().find(|(_, v)| **v < T::zero()) {
        return Err(TensorError::NegativeVariance {
            channel,
            value: v.as_f64(),
        });
    }
    let scale: Vec<T> = (0..s.c)
        .map(|c| bn.gamma[c] / (bn.rolling_var[c] + epsilon).sqrt())
        .collect();
    let mut y = x.clone();
    let plane = s.plane_len();
    for (i, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
        let c = i % s.c;
        let (m, k, b) = (bn.rolling_mean[c], scale[c], beta[c]);
        chunk.iter_mut().for_each(|v| *v = k * (*v - m) + b);
    }
    Ok(y)
}

/// Normalizes with the batch's own statistics. Returns the output and the
/// cache needed by [`batchnorm_backward`]; the caller folds `cache.mean` /
/// `cache.var` into the rolling statistics with [`update_rolling`].
pub fn batchnorm_training<T: Element>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    epsilon: T,
) -> Result<(Tensor<T>, BatchNormCache<T>), TensorError> {
    let s = x.shape();
    check_len("gamma", gamma, s.c)?;
    check_len("beta", beta, s.c)?;
    let plane = s.plane_len();
    let count = T::from_f64((s.n * plane) as f64);
    let planes = |c: usize| (0..s.n).map(move |n| s.index(n, c, 0, 0));

    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for c in 0..s.c {
        let sum: T = planes(c).map(|o| x.data()[o..o + plane].iter().copied().sum::<T>()).sum();
        let m = sum / count;
        let sq: T = planes(c)
            .map(|o| x.data()[o..o + plane].iter().map(|&v| (v - m) * (v - m)).sum::<T>())
            .sum();
        mean[c] = m;
        var[c] = sq / count;
    }

    let mut x_hat = x.clone();
    let mut y = x.clone();
    for c in 0..s.c {
        let inv = T::one() / (var[c] + epsilon).sqrt();
        for o in planes(c) {
            for i in o..o + plane {
                let h = (x.data()[i] - mean[c]) * inv;
                x_hat.data_mut()[i] = h;
                y.data_mut()[i] = gamma[c] * h + beta[c];
            }
        }
    }
    Ok((y, BatchNormCache { x_hat, mean, var }))
}

/// Gradients of the training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub fn batchnorm_backward<T: Element>(
    cache: &BatchNormCache<T>,
    gamma: &[T],
    epsilon: T,
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>, TensorError> {
    let s = cache.x_hat.shape();
    grad_out.ensure_shape(s)?;
    check_len("gamma", gamma, s.c)?;
    let plane = s.plane_len();
    let count = T::from_f64((s.n * plane) as f64);
    let dy = grad_out.data();
    let xh = cache.x_hat.data();
    let mut dgamma = vec![T::zero(); s.c];
    let mut dbeta = vec![T::zero(); s.c];
    let mut dx = Tensor::zeros(s)?;
    for c in 0..s.c {
        let offsets: Vec<usize> = (0..s.n).map(|n| s.index(n, c, 0, 0)).collect();
        let (mut sum_dy, mut sum_dy_xh) = (T::zero(), T::zero());
        for &o in &offsets {
            for i in o..o + plane {
                sum_dy = sum_dy + dy[i];
                sum_dy_xh = sum_dy_xh + dy[i] * xh[i];
            }
        }
        dgamma[c] = sum_dy_xh;
        dbeta[c] = sum_dy;
        let k = gamma[c] / (cache.var[c] + epsilon).sqrt();
        let (mean_dy, mean_dy_xh) = (sum_dy / count, sum_dy_xh / count);
        for &o in &offsets {
            for i in o..o + plane {
                dx.data_mut()[i] = k * (dy[i] - mean_dy - xh[i] * mean_dy_xh);
            }
        }
    }
    Ok(BatchNormGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    })
}

/// `rolling <- 0.99 rolling + 0.01 batch` for mean and variance.
pub fn update_rolling<T: Element>(bn: &mut BatchNormParams<T>, mean: &[T], var: &[T]) {
    let keep = T::from_f64(ROLLING_MOMENTUM);
    let take = T::one() - keep;
    for (r, &m) in bn.rolling_mean.iter_mut().zip(mean) {
        *r = keep * *r + take * m;
    }
    for (r, &v) in bn.rolling_var.iter_mut().zip(var) {
        *r = keep * *r + take * v;
    }
}
