//! Per-channel batch normalisation over `N·D·H·W`.

use crate::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// What the training-mode backward pass needs.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub x_hat: Tensor,
    pub inv_std: Vec<f64>,
}

/// Batch mean and biased variance per channel, accumulated in `f64`.
pub fn batch_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let [n, c, ..] = x.shape();
    let count = (n * x.voxels()) as f64;
    let mut means = Vec::with_capacity(c);
    let mut vars = Vec::with_capacity(c);
    for ch in 0..c {
        let sum: f64 = (0..n).map(|s| x.channel(s, ch).iter().map(|&v| v as f64).sum::<f64>()).sum();
        let mean = sum / count;
        let sq: f64 = (0..n)
            .map(|s| x.channel(s, ch).iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>())
            .sum();
        means.push(mean);
        vars.push(sq / count);
    }
    (means, vars)
}

/// Normalises with batch statistics and folds them into the running
/// statistics (`running = 0.9·running + 0.1·batch`, unbiased variance).
pub fn batchnorm_train(
    x: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    running_mean: &mut [f32],
    running_var: &mut [f32],
) -> (Tensor, BatchNormCache) {
    let [n, c, ..] = x.shape();
    let (means, vars) = batch_stats(x);
    let count = n * x.voxels();
    let mut x_hat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(c);
    for ch in 0..c {
        let istd = 1.0 / (vars[ch] + BN_EPS).sqrt();
        inv_std.push(istd);
        for s in 0..n {
            let src = x.channel(s, ch);
            let xh: Vec<f32> = src.iter().map(|&v| ((v as f64 - means[ch]) * istd) as f32).collect();
            for (o, &h) in y.channel_mut(s, ch).iter_mut().zip(&xh) {
                *o = gamma[ch] * h + beta[ch];
            }
            x_hat.channel_mut(s, ch).copy_from_slice(&xh);
        }
        let unbiased = if count > 1 { vars[ch] * count as f64 / (count - 1) as f64 } else { vars[ch] };
        running_mean[ch] = (BN_MOMENTUM * running_mean[ch] as f64 + (1.0 - BN_MOMENTUM) * means[ch]) as f32;
        running_var[ch] = (BN_MOMENTUM * running_var[ch] as f64 + (1.0 - BN_MOMENTUM) * unbiased) as f32;
    }
    (y, BatchNormCache { x_hat, inv_std })
}

pub fn batchnorm_eval(x: &Tensor, gamma: &[f32], beta: &[f32], running_mean: &[f32], running_var: &[f32]) -> Tensor {
    let [n, c, ..] = x.shape();
    let mut y = Tensor::zeros(x.shape());
    for ch in 0..c {
        let istd = 1.0 / (running_var[ch] as f64 + BN_EPS).sqrt();
        let scale = (gamma[ch] as f64 * istd) as f32;
        let shift = (beta[ch] as f64 - running_mean[ch] as f64 * gamma[ch] as f64 * istd) as f32;
        for s in 0..n {
            for (o, &v) in y.channel_mut(s, ch).iter_mut().zip(x.channel(s, ch)) {
                *o = v * scale + shift;
            }
        }
    }
    y
}

/// Training-mode backward: returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_train_backward(gy: &Tensor, gamma: &[f32], cache: &BatchNormCache) -> (Tensor, Vec<f32>, Vec<f32>) {
    let [n, c, ..] = gy.shape();
    let m = (n * gy.voxels()) as f64;
    let mut gx = Tensor::zeros(gy.shape());
    let mut dgamma = Vec::with_capacity(c);
    let mut dbeta = Vec::with_capacity(c);
    for ch in 0..c {
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for s in 0..n {
            for (&g, &h) in gy.channel(s, ch).iter().zip(cache.x_hat.channel(s, ch)) {
                sum_g += g as f64;
                sum_gx += g as f64 * h as f64;
            }
        }
        dgamma.push(sum_gx as f32);
        dbeta.push(sum_g as f32);
        let k = gamma[ch] as f64 * cache.inv_std[ch] / m;
        for s in 0..n {
            let src_g = gy.channel(s, ch);
            let src_h = cache.x_hat.channel(s, ch);
            for ((o, &g), &h) in gx.channel_mut(s, ch).iter_mut().zip(src_g).zip(src_h) {
                *o = (k * (m * g as f64 - sum_g - h as f64 * sum_gx)) as f32;
            }
        }
    }
    (gx, dgamma, dbeta)
}

/// Eval-mode backward (a fixed affine map per channel).
pub fn batchnorm_eval_backward(x: &Tensor, gy: &Tensor, gamma: &[f32], running_mean: &[f32], running_var: &[f32]) -> (Tensor, Vec<f32>, Vec<f32>) {
    let [n, c, ..] = gy.shape();
    let mut gx = Tensor::zeros(gy.shape());
    let mut dgamma = Vec::with_capacity(c);
    let mut dbeta = Vec::with_capacity(c);
    for ch in 0..c {
        let istd = 1.0 / (running_var[ch] as f64 + BN_EPS).sqrt();
        let mut sg = 0.0f64;
        let mut sgx = 0.0f64;
        for s in 0..n {
            for (&g, &v) in gy.channel(s, ch).iter().zip(x.channel(s, ch)) {
                sg += g as f64;
                sgx += g as f64 * (v as f64 - running_mean[ch] as f64) * istd;
            }
            let scale = (gamma[ch] as f64 * istd) as f32;
            for (o, &g) in gx.channel_mut(s, ch).iter_mut().zip(gy.channel(s, ch)) {
                *o = g * scale;
            }
        }
        dgamma.push(sgx as f32);
        dbeta.push(sg as f32);
    }
    (gx, dgamma, dbeta)
}
