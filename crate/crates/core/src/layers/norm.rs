//! Batch normalization over the channel axis (axis 1). Works for both
//! `(N, C)` feature matrices and `(N, C, H, W)` maps.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Values the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub enum BatchNormCache {
    /// Normalized input and per-channel `1/sqrt(var + eps)` from batch
    /// statistics.
    Train { xhat: Tensor, inv_std: Vec<f64> },
    /// Per-channel `1/sqrt(running_var + eps)`; the normalization is affine.
    Infer { xhat: Tensor, inv_std: Vec<f64> },
}

pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn layout(x: &Tensor) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 2 && s.len() != 4 {
        return Err(Error::shape(format!(
            "batch norm expects (N, C) or (N, C, H, W), got {s:?}"
        )));
    }
    let spatial = s[2..].iter().product();
    Ok((s[0], s[1], spatial))
}

fn check_affine(c: usize, gamma: &Tensor, beta: &Tensor) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(format!(
            "batch norm gamma {:?} / beta {:?} for {c} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(())
}

fn normalize(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
) -> Result<(Tensor, Tensor)> {
    let (n, c, sp) = layout(x)?;
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    let (g, b) = (gamma.data(), beta.data());
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * sp;
            for i in base..base + sp {
                let h = (x.data()[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                y[i] = g[ch] * h + b[ch];
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), y)?,
        Tensor::new(x.shape().to_vec(), xhat)?,
    ))
}

/// Normalizes with the batch's own per-channel mean and (biased) variance.
pub fn batchnorm_forward_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, BatchNormCache, BatchStats)> {
    let (n, c, sp) = layout(x)?;
    check_affine(c, gamma, beta)?;
    let count = n * sp;
    if count == 0 {
        return Err(Error::shape("batch norm over an empty batch"));
    }
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for s in 0..n {
        for (ch, m) in mean.iter_mut().enumerate() {
            let base = (s * c + ch) * sp;
            *m += x.data()[base..base + sp].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * sp;
            var[ch] += x.data()[base..base + sp]
                .iter()
                .map(|v| (v - mean[ch]).powi(2))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let (y, xhat) = normalize(x, gamma, beta, &mean, &inv_std)?;
    Ok((y, BatchNormCache::Train { xhat, inv_std }, BatchStats { mean, var }))
}

pub fn batchnorm_forward_infer(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
    eps: f64,
) -> Result<(Tensor, BatchNormCache)> {
    let (_, c, _) = layout(x)?;
    check_affine(c, gamma, beta)?;
    let inv_std: Vec<f64> = running_var
        .data()
        .iter()
        .map(|v| 1.0 / (v + eps).sqrt())
        .collect();
    let (y, xhat) = normalize(x, gamma, beta, running_mean.data(), &inv_std)?;
    Ok((y, BatchNormCache::Infer { xhat, inv_std }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward(
    grad_out: &Tensor,
    gamma: &Tensor,
    cache: &BatchNormCache,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (xhat, inv_std, train) = match cache {
        BatchNormCache::Train { xhat, inv_std } => (xhat, inv_std, true),
        BatchNormCache::Infer { xhat, inv_std } => (xhat, inv_std, false),
    };
    if grad_out.shape() != xhat.shape() {
        return Err(Error::shape("batch norm gradient has the wrong shape"));
    }
    let (n, c, sp) = layout(xhat)?;
    let count = (n * sp) as f64;
    let dy = grad_out.data();
    let xh = xhat.data();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * sp;
            for i in base..base + sp {
                dbeta[ch] += dy[i];
                dgamma[ch] += dy[i] * xh[i];
            }
        }
    }
    let g = gamma.data();
    let mut dx = vec![0.0; dy.len()];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * sp;
            let k = g[ch] * inv_std[ch];
            for i in base..base + sp {
                dx[i] = if train {
                    k * (dy[i] - dbeta[ch] / count - xh[i] * dgamma[ch] / count)
                } else {
                    k * dy[i]
                };
            }
        }
    }
    Ok((
        Tensor::new(xhat.shape().to_vec(), dx)?,
        Tensor::new(vec![c], dgamma)?,
        Tensor::new(vec![c], dbeta)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_channel_outputs_beta() {
        let x = Tensor::full(vec![2, 1, 2, 2], 3.5);
        let gamma = Tensor::full(vec![1], 2.0);
        let beta = Tensor::full(vec![1], 0.25);
        let (y, _, _) = batchnorm_forward_train(&x, &gamma, &beta, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn unit_variance_pair() {
        let x = Tensor::new(vec![2, 1], vec![-1.0, 1.0]).unwrap();
        let eps = 1e-5;
        let (y, _, stats) =
            batchnorm_forward_train(&x, &Tensor::full(vec![1], 1.0), &Tensor::zeros(vec![1]), eps)
                .unwrap();
        let k = 1.0 / (1.0 + eps).sqrt();
        assert!((y.data()[0] + k).abs() < 1e-15);
        assert!((y.data()[1] - k).abs() < 1e-15);
        assert_eq!(stats.var, vec![1.0]);
    }
}
