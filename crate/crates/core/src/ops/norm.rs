//! Per-channel batch normalization over NCHW tensors.

use crate::error::{Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::{Element, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub initialized: bool,
}

impl<T: Element> BatchNormState<T> {
    /// Mean 0, variance 1, usable for inference immediately.
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            initialized: true,
        }
    }

    /// No statistics yet; the first training batch seeds them.
    pub fn uninitialized(channels: usize) -> Self {
        BatchNormState { initialized: false, ..Self::new(channels) }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

pub(crate) struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

struct Forward<T> {
    out: Tensor<T>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

fn forward<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &mut BatchNormState<T>,
    mode: Mode,
) -> Result<Forward<T>> {
    let (n, c, h, w) = input.dims4("batchnorm2d")?;
    for (name, p) in [("gamma", gamma), ("beta", beta)] {
        if p.shape() != [c] {
            return Err(Error::shape("batchnorm2d", format!("{name} must be [{c}], got {:?}", p.shape())));
        }
    }
    if state.channels() != c {
        return Err(Error::shape(
            "batchnorm2d",
            format!("running state has {} channels, input has {c}", state.channels()),
        ));
    }
    let plane = h * w;
    let count = n * plane;
    let x = input.data();
    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        Mode::Train => {
            if count < 2 {
                return Err(Error::shape(
                    "batchnorm2d",
                    format!("training needs at least 2 values per channel, got {count}"),
                ));
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    s += x[(b * c + ch) * plane..][..plane].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let m = s / count as f64;
                let mut ss = 0.0;
                for b in 0..n {
                    ss += x[(b * c + ch) * plane..][..plane]
                        .iter()
                        .map(|v| {
                            let d = v.as_f64() - m;
                            d * d
                        })
                        .sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = ss / count as f64;
            }
            let rm = state.running_mean.data_mut();
            for ch in 0..c {
                rm[ch] = if state.initialized {
                    T::from_f64_lossy(BN_MOMENTUM * rm[ch].as_f64() + (1.0 - BN_MOMENTUM) * mean[ch])
                } else {
                    T::from_f64_lossy(mean[ch])
                };
            }
            let rv = state.running_var.data_mut();
            for ch in 0..c {
                rv[ch] = if state.initialized {
                    T::from_f64_lossy(BN_MOMENTUM * rv[ch].as_f64() + (1.0 - BN_MOMENTUM) * var[ch])
                } else {
                    T::from_f64_lossy(var[ch])
                };
            }
            state.initialized = true;
            (mean, var)
        }
        Mode::Infer => {
            if !state.initialized {
                return Err(Error::MissingRunningStats);
            }
            (
                state.running_mean.data().iter().map(|v| v.as_f64()).collect(),
                state.running_var.data().iter().map(|v| v.as_f64()).collect(),
            )
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::from_f64_lossy(1.0 / (v + BN_EPSILON).sqrt())).collect();
    let mean_t: Vec<T> = mean.iter().map(|&m| T::from_f64_lossy(m)).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let (g, bt, m, is) = (gamma.data()[ch], beta.data()[ch], mean_t[ch], inv_std[ch]);
            for i in off..off + plane {
                let xh = (x[i] - m) * is;
                xhat[i] = xh;
                out[i] = g * xh + bt;
            }
        }
    }
    Ok(Forward { out: Tensor::from_vec(input.shape().to_vec(), out)?, xhat, inv_std })
}

/// Batch normalization without gradient recording.
pub fn batchnorm2d_forward<T: Element>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &mut BatchNormState<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    forward(input, gamma, beta, state, mode).map(|f| f.out)
}

pub(crate) fn batchnorm2d_backward<T: Element>(
    shape: &[usize],
    gamma: &Tensor<T>,
    xhat: &[T],
    inv_std: &[T],
    train: bool,
    gout: &Tensor<T>,
) -> BatchNormGrads<T> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let count = (n * plane) as f64;
    let g = gout.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = vec![T::zero(); g.len()];
    for ch in 0..c {
        let (mut sg, mut sgx) = (0.0f64, 0.0f64);
        for b in 0..n {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                sg += g[i].as_f64();
                sgx += (g[i] * xhat[i]).as_f64();
            }
        }
        dbeta[ch] = T::from_f64_lossy(sg);
        dgamma[ch] = T::from_f64_lossy(sgx);
        let gm = gamma.data()[ch];
        let is = inv_std[ch];
        if train {
            // dx = gamma * inv_std * (g - mean(g) - xhat * mean(g * xhat))
            let mg = T::from_f64_lossy(sg / count);
            let mgx = T::from_f64_lossy(sgx / count);
            let scale = gm * is;
            for b in 0..n {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    dx[i] = scale * (g[i] - mg - xhat[i] * mgx);
                }
            }
        } else {
            let scale = gm * is;
            for b in 0..n {
                let off = (b * c + ch) * plane;
                for i in off..off + plane {
                    dx[i] = scale * g[i];
                }
            }
        }
    }
    BatchNormGrads {
        input: Tensor::from_vec(shape.to_vec(), dx).expect("bn input grad"),
        gamma: Tensor::from_vec(vec![c], dgamma).expect("bn gamma grad"),
        beta: Tensor::from_vec(vec![c], dbeta).expect("bn beta grad"),
    }
}

impl<T: Element> Tape<T> {
    /// Batch normalization; in train mode also updates `state`.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState<T>,
        mode: Mode,
    ) -> Result<Var> {
        let f = forward(self.value(input), self.value(gamma), self.value(beta), state, mode)?;
        self.push(
            "batchnorm2d",
            f.out,
            Op::BatchNorm2d { input, gamma, beta, xhat: f.xhat, inv_std: f.inv_std, train: mode == Mode::Train },
        )
    }
}
