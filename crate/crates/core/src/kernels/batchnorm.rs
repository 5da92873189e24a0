//! Per-channel batch normalization over (batch, height, width).

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T: Scalar = f64> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub epsilon: f64,
    pub mode: BnMode,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
            mode: BnMode::Train,
        }
    }

    pub fn forward(&mut self, input: &Tensor<T>) -> Result<(Tensor<T>, BnCache<T>)> {
        batch_norm(
            input,
            &self.gamma,
            &self.beta,
            &mut self.running_mean,
            &mut self.running_var,
            BnParams {
                momentum: self.momentum,
                epsilon: self.epsilon,
                mode: self.mode,
            },
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BnParams {
    pub momentum: f64,
    pub epsilon: f64,
    pub mode: BnMode,
}

impl Default for BnParams {
    fn default() -> Self {
        BnParams {
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
            mode: BnMode::Train,
        }
    }
}

/// Saved forward quantities for the backward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T: Scalar> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mode: BnMode,
}

pub fn batch_norm<T: Scalar>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &mut [T],
    running_var: &mut [T],
    params: BnParams,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let s = input.shape();
    let c = s.c;
    if gamma.len() != c || beta.len() != c || running_mean.len() != c || running_var.len() != c {
        return Err(Error::shape(
            "batch_norm",
            format!("{c} channels, state vectors of length {}", gamma.len()),
        ));
    }
    if params.epsilon <= 0.0 {
        return Err(Error::invalid("batch_norm", "epsilon must be positive"));
    }
    let count = s.n * s.plane();
    let eps = T::of(params.epsilon);
    let mut inv_std = vec![T::zero(); c];
    let mut mean = vec![T::zero(); c];
    match params.mode {
        BnMode::Train => {
            if count == 0 {
                return Err(Error::invalid("batch_norm", "no elements per channel in train mode"));
            }
            let m = T::of(params.momentum);
            let cnt = T::from_usize(count).unwrap();
            for ch in 0..c {
                let mut sum = T::zero();
                for n in 0..s.n {
                    for &v in input.plane(n, ch) {
                        sum = sum + v;
                    }
                }
                let mu = sum / cnt;
                let mut sq = T::zero();
                for n in 0..s.n {
                    for &v in input.plane(n, ch) {
                        let d = v - mu;
                        sq = sq + d * d;
                    }
                }
                let var = sq / cnt;
                mean[ch] = mu;
                inv_std[ch] = T::one() / (var + eps).sqrt();
                let unbiased = if count > 1 {
                    sq / T::from_usize(count - 1).unwrap()
                } else {
                    var
                };
                running_mean[ch] = (T::one() - m) * running_mean[ch] + m * mu;
                running_var[ch] = (T::one() - m) * running_var[ch] + m * unbiased;
            }
        }
        BnMode::Eval => {
            for ch in 0..c {
                if running_var[ch] < T::zero() {
                    return Err(Error::invalid("batch_norm", "negative running variance"));
                }
                mean[ch] = running_mean[ch];
                inv_std[ch] = T::one() / (running_var[ch] + eps).sqrt();
            }
        }
    }
    let mut normalized = Tensor::zeros(s);
    let mut out = Tensor::zeros(s);
    let pl = s.plane();
    for n in 0..s.n {
        for ch in 0..c {
            let base = (n * c + ch) * pl;
            for i in base..base + pl {
                let xh = (input.data()[i] - mean[ch]) * inv_std[ch];
                normalized.data_mut()[i] = xh;
                out.data_mut()[i] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    out.check_finite("batch_norm")?;
    Ok((
        out,
        BnCache {
            normalized,
            inv_std,
            mode: params.mode,
        },
    ))
}

pub struct BnGrads<T: Scalar> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

pub fn batch_norm_backward<T: Scalar>(
    cache: &BnCache<T>,
    gamma: &[T],
    grad_out: &Tensor<T>,
) -> Result<BnGrads<T>> {
    let s = grad_out.shape();
    if s != cache.normalized.shape() {
        return Err(Error::shape("batch_norm_backward", "grad/cache shape mismatch"));
    }
    let c = s.c;
    let pl = s.plane();
    let count = s.n * pl;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        for n in 0..s.n {
            let g = grad_out.plane(n, ch);
            let xh = cache.normalized.plane(n, ch);
            for (&gv, &xv) in g.iter().zip(xh) {
                dbeta[ch] = dbeta[ch] + gv;
                dgamma[ch] = dgamma[ch] + gv * xv;
            }
        }
    }
    let mut gin = Tensor::zeros(s);
    let cnt = T::from_usize(count.max(1)).unwrap();
    for n in 0..s.n {
        for ch in 0..c {
            let scale = gamma[ch] * cache.inv_std[ch];
            let base = (n * c + ch) * pl;
            for i in base..base + pl {
                let g = grad_out.data()[i];
                gin.data_mut()[i] = match cache.mode {
                    BnMode::Eval => g * scale,
                    BnMode::Train => {
                        let xh = cache.normalized.data()[i];
                        scale * (g - dbeta[ch] / cnt - xh * dgamma[ch] / cnt)
                    }
                };
            }
        }
    }
    gin.check_finite("batch_norm_backward")?;
    Ok(BnGrads {
        input: gin,
        gamma: dgamma,
        beta: dbeta,
    })
}
