//! Per-channel batch normalization over `(batch, T, H, W)`.
//!
//! Statistics are accumulated in `f64` in a fixed order (batch, then voxel),
//! so results do not depend on anything but the input.

use serde::{Deserialize, Serialize};

use super::Element;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BatchNormMode {
    Train,
    Eval,
}

/// Running mean and (unbiased) variance per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Element> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Normalized input plus the per-channel inverse standard deviation; both
/// are needed again on the backward pass.
pub(crate) struct NormOutput<T> {
    pub y: Vec<T>,
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// `shape` is `[B, C, T, H, W]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn forward<T: Element>(
    x: &[T],
    shape: &[usize],
    gamma: &[T],
    beta: &[T],
    stats: &mut RunningStats<T>,
    mode: BatchNormMode,
    momentum: f64,
    eps: f64,
) -> NormOutput<T> {
    let (batch, channels) = (shape[0], shape[1]);
    let vol: usize = shape[2..].iter().product();
    let count = batch * vol;
    let mut mean = vec![0.0f64; channels];
    let mut var = vec![0.0f64; channels];
    match mode {
        BatchNormMode::Train => {
            for c in 0..channels {
                let mut sum = 0.0f64;
                for b in 0..batch {
                    sum += x[(b * channels + c) * vol..][..vol].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let m = sum / count as f64;
                let mut sq = 0.0f64;
                for b in 0..batch {
                    sq += x[(b * channels + c) * vol..][..vol]
                        .iter()
                        .map(|v| {
                            let d = v.as_f64() - m;
                            d * d
                        })
                        .sum::<f64>();
                }
                mean[c] = m;
                var[c] = sq / count as f64;
                let unbiased = if count > 1 { sq / (count - 1) as f64 } else { var[c] };
                stats.mean[c] = T::lit((1.0 - momentum) * stats.mean[c].as_f64() + momentum * m);
                stats.var[c] = T::lit((1.0 - momentum) * stats.var[c].as_f64() + momentum * unbiased);
            }
        }
        BatchNormMode::Eval => {
            for c in 0..channels {
                mean[c] = stats.mean[c].as_f64();
                var[c] = stats.var[c].as_f64();
            }
        }
    }
    let inv_std: Vec<T> = var.iter().map(|v| T::lit(1.0 / (v + eps).sqrt())).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * vol;
            let m = T::lit(mean[c]);
            for i in off..off + vol {
                let h = (x[i] - m) * inv_std[c];
                xhat[i] = h;
                y[i] = gamma[c] * h + beta[c];
            }
        }
    }
    NormOutput { y, xhat, inv_std }
}

/// Returns `(d_input, d_gamma, d_beta)`. In eval mode the statistics are
/// constants, so the input gradient is a per-channel scale.
pub(crate) fn backward<T: Element>(
    dy: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    shape: &[usize],
    mode: BatchNormMode,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (batch, channels) = (shape[0], shape[1]);
    let vol: usize = shape[2..].iter().product();
    let count = (batch * vol) as f64;
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    let mut sum_dy = vec![0.0f64; channels];
    let mut sum_dy_xhat = vec![0.0f64; channels];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * vol;
            for i in off..off + vol {
                sum_dy[c] += dy[i].as_f64();
                sum_dy_xhat[c] += (dy[i] * xhat[i]).as_f64();
            }
        }
    }
    for c in 0..channels {
        dgamma[c] = T::lit(sum_dy_xhat[c]);
        dbeta[c] = T::lit(sum_dy[c]);
    }
    let mut dx = vec![T::zero(); dy.len()];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * vol;
            let k = gamma[c] * inv_std[c];
            match mode {
                BatchNormMode::Train => {
                    let mdy = T::lit(sum_dy[c] / count);
                    let mdyx = T::lit(sum_dy_xhat[c] / count);
                    for i in off..off + vol {
                        dx[i] = k * (dy[i] - mdy - xhat[i] * mdyx);
                    }
                }
                BatchNormMode::Eval => {
                    for i in off..off + vol {
                        dx[i] = k * dy[i];
                    }
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}
