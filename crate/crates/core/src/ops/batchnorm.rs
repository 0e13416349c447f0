use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

pub const BN_EPSILON: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.99;

/// Affine parameters and running statistics of one batch-norm layer.
#[derive(Clone, Debug)]
pub struct BatchNormState<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::full(&[channels], T::one()).with_grad(),
            beta: Tensor::zeros(&[channels]).with_grad(),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Values saved by a TRAIN-mode forward for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    normalized: Vec<T>,
    inv_std: Vec<T>,
}

/// Normalizes over every axis except the last (channel) axis.
pub fn batch_norm<T: Real>(
    x: &Tensor<T>,
    state: &mut BatchNormState<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Option<BatchNormCache<T>>)> {
    let c = state.channels();
    let found = *x.shape().last().unwrap_or(&0);
    if found != c {
        return Err(Error::shape("batch_norm", "channels", c, found));
    }
    let n = x.len() / c;
    if n == 0 {
        return Err(Error::EmptyBatch("batch_norm"));
    }
    let eps = T::lit(state.epsilon);
    let mut y = x.zeros_like();
    match mode {
        Mode::Infer => {
            let scale: Vec<T> = (0..c)
                .map(|j| state.gamma.data()[j] / (state.running_var.data()[j] + eps).sqrt())
                .collect();
            let rm = state.running_mean.data();
            let beta = state.beta.data();
            for (row_out, row_in) in y.data_mut().chunks_mut(c).zip(x.data().chunks(c)) {
                for j in 0..c {
                    row_out[j] = (row_in[j] - rm[j]) * scale[j] + beta[j];
                }
            }
            Ok((y, None))
        }
        Mode::Train => {
            let nf = T::from_usize(n).unwrap();
            let mut mean = vec![T::zero(); c];
            for row in x.data().chunks(c) {
                for j in 0..c {
                    mean[j] = mean[j] + row[j];
                }
            }
            mean.iter_mut().for_each(|m| *m = *m / nf);
            let mut var = vec![T::zero(); c];
            for row in x.data().chunks(c) {
                for j in 0..c {
                    let d = row[j] - mean[j];
                    var[j] = var[j] + d * d;
                }
            }
            var.iter_mut().for_each(|v| *v = *v / nf);
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            let mut normalized = vec![T::zero(); x.len()];
            let (gamma, beta) = (state.gamma.data(), state.beta.data());
            for ((row_out, row_in), row_hat) in y
                .data_mut()
                .chunks_mut(c)
                .zip(x.data().chunks(c))
                .zip(normalized.chunks_mut(c))
            {
                for j in 0..c {
                    let h = (row_in[j] - mean[j]) * inv_std[j];
                    row_hat[j] = h;
                    row_out[j] = gamma[j] * h + beta[j];
                }
            }
            let m = T::lit(state.momentum);
            let rest = T::one() - m;
            for j in 0..c {
                let rm = &mut state.running_mean.data_mut()[j];
                *rm = m * *rm + rest * mean[j];
                let rv = &mut state.running_var.data_mut()[j];
                *rv = m * *rv + rest * var[j];
            }
            Ok((y, Some(BatchNormCache { normalized, inv_std })))
        }
    }
}

/// Returns the input gradient and accumulates into `gamma`/`beta` gradients.
pub fn batch_norm_backward<T: Real>(
    upstream: &Tensor<T>,
    cache: &BatchNormCache<T>,
    state: &mut BatchNormState<T>,
) -> Result<Tensor<T>> {
    let c = state.channels();
    if upstream.len() != cache.normalized.len() || upstream.shape().last() != Some(&c) {
        return Err(Error::shape(
            "batch_norm_backward",
            "upstream",
            cache.normalized.len(),
            upstream.len(),
        ));
    }
    let n = upstream.len() / c;
    let nf = T::from_usize(n).unwrap();
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_hat = vec![T::zero(); c];
    for (dy, h) in upstream.data().chunks(c).zip(cache.normalized.chunks(c)) {
        for j in 0..c {
            sum_dy[j] = sum_dy[j] + dy[j];
            sum_dy_hat[j] = sum_dy_hat[j] + dy[j] * h[j];
        }
    }
    state.gamma.accumulate_grad(&sum_dy_hat);
    state.beta.accumulate_grad(&sum_dy);
    let gamma = state.gamma.data();
    let mut dx = upstream.zeros_like();
    for ((out, dy), h) in dx
        .data_mut()
        .chunks_mut(c)
        .zip(upstream.data().chunks(c))
        .zip(cache.normalized.chunks(c))
    {
        for j in 0..c {
            // dx = γ·σ⁻¹/N · (N·dy − Σdy − x̂·Σ(dy·x̂))
            out[j] = gamma[j] * cache.inv_std[j] / nf * (nf * dy[j] - sum_dy[j] - h[j] * sum_dy_hat[j]);
        }
    }
    Ok(dx)
}
