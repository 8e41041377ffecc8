use super::expect_4d;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
/// Fraction of the old running statistic kept at each update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Saved forward state for [`batchnorm_backward`].
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    shape: Vec<usize>,
}

/// Per-channel running mean and variance used in inference mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    /// Exponential moving average update with the batch mean and (biased)
    /// batch variance; the variance is bias-corrected by `n / (n - 1)`.
    pub fn update(&mut self, batch_mean: &[T], batch_var: &[T], count: usize, momentum: T) {
        let correction = if count > 1 {
            T::lit(count as f64 / (count - 1) as f64)
        } else {
            T::one()
        };
        for (m, &bm) in self.mean.iter_mut().zip(batch_mean) {
            *m = momentum * *m + (T::one() - momentum) * bm;
        }
        for (v, &bv) in self.var.iter_mut().zip(batch_var) {
            *v = momentum * *v + (T::one() - momentum) * bv * correction;
        }
    }
}

fn check_channels<T: Scalar>(input: &Tensor<T>, gamma: &[T], beta: &[T]) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = expect_4d(input, "batchnorm input")?;
    if gamma.len() != c || beta.len() != c {
        return Err(Error::dim(format!(
            "batchnorm: {c} channels but gamma/beta have {}/{}",
            gamma.len(),
            beta.len()
        )));
    }
    Ok((b, c, h * w))
}

/// Training-mode batch normalization. Returns the output, the backward
/// cache, and the per-channel batch mean and biased variance.
#[allow(clippy::type_complexity)]
pub fn batchnorm_train<T: Scalar>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
) -> Result<(Tensor<T>, BnCache<T>, Vec<T>, Vec<T>)> {
    let (b, c, hw) = check_channels(input, gamma, beta)?;
    let x = input.data();
    let count = T::lit((b * hw) as f64);
    let eps = T::lit(BN_EPSILON);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for n in 0..b {
            s = s + x[(n * c + ch) * hw..][..hw].iter().copied().sum::<T>();
        }
        let mu = s / count;
        let mut sq = T::zero();
        for n in 0..b {
            for &v in &x[(n * c + ch) * hw..][..hw] {
                sq = sq + (v - mu) * (v - mu);
            }
        }
        mean[ch] = mu;
        var[ch] = sq / count;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for n in 0..b {
        for ch in 0..c {
            let off = (n * c + ch) * hw;
            for i in off..off + hw {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    let cache = BnCache { xhat, inv_std, shape: input.shape().to_vec() };
    Ok((Tensor::new(input.shape(), out)?, cache, mean, var))
}

/// Inference-mode batch normalization with stored running statistics.
pub fn batchnorm_infer<T: Scalar>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    stats: Option<&RunningStats<T>>,
) -> Result<Tensor<T>> {
    let (b, c, hw) = check_channels(input, gamma, beta)?;
    let stats = stats.ok_or_else(|| {
        Error::Usage("batchnorm inference requested before running statistics exist".into())
    })?;
    if stats.mean.len() != c || stats.var.len() != c {
        return Err(Error::dim("batchnorm: running statistics do not match channel count"));
    }
    let eps = T::lit(BN_EPSILON);
    let scale: Vec<T> = (0..c).map(|ch| gamma[ch] / (stats.var[ch] + eps).sqrt()).collect();
    let shift: Vec<T> = (0..c).map(|ch| beta[ch] - stats.mean[ch] * scale[ch]).collect();
    let mut out = input.data().to_vec();
    for n in 0..b {
        for ch in 0..c {
            for v in &mut out[(n * c + ch) * hw..][..hw] {
                *v = *v * scale[ch] + shift[ch];
            }
        }
    }
    Tensor::new(input.shape(), out)
}

/// Gradients of [`batchnorm_train`] with respect to input, gamma and beta.
pub fn batchnorm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &BnCache<T>,
    gamma: &[T],
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    grad_out.expect_shape(&cache.shape)?;
    let (b, c, h, w) = expect_4d(grad_out, "batchnorm grad")?;
    let hw = h * w;
    let g = grad_out.data();
    let m = T::lit((b * hw) as f64);
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for n in 0..b {
        for ch in 0..c {
            let off = (n * c + ch) * hw;
            for i in off..off + hw {
                gbeta[ch] = gbeta[ch] + g[i];
                ggamma[ch] = ggamma[ch] + g[i] * cache.xhat[i];
            }
        }
    }
    let mut gx = vec![T::zero(); g.len()];
    for n in 0..b {
        for ch in 0..c {
            let k = gamma[ch] * cache.inv_std[ch] / m;
            let off = (n * c + ch) * hw;
            for i in off..off + hw {
                gx[i] = k * (m * g[i] - gbeta[ch] - cache.xhat[i] * ggamma[ch]);
            }
        }
    }
    Ok((Tensor::new(&cache.shape, gx)?, ggamma, gbeta))
}
