//! Bias-corrected Adam.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First and second moments per parameter, in registry order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub names: Vec<String>,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>) -> Self {
        let mut s = AdamState { names: Vec::new(), m: Vec::new(), v: Vec::new(), t: 0 };
        for (n, p) in params {
            s.names.push(n.to_string());
            s.m.push(Tensor::zeros(p.shape()));
            s.v.push(Tensor::zeros(p.shape()));
        }
        s
    }
}

/// One Adam update. `grads[i]` belongs to `params[i]`; a `None` gradient is
/// an error naming that parameter, and nothing is modified in that case.
pub fn adam_step<T: Element>(
    params: &mut [(&str, &mut Tensor<T>)],
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Config(format!(
            "adam: {} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, ((name, p), g)) in params.iter().zip(grads).enumerate() {
        let g = g.as_ref().ok_or_else(|| Error::MissingGradient(name.to_string()))?;
        if g.shape() != p.shape() || state.m[i].shape() != p.shape() || state.names[i] != *name {
            return Err(Error::shape("adam_step", format!("state or gradient does not match parameter `{name}`")));
        }
    }
    state.t += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (i, (_, p)) in params.iter_mut().enumerate() {
        let g = grads[i].as_ref().expect("checked above").data();
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        // Moments are kept in T, updates are computed in f64.
        let m = m.iter_mut();
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m).zip(v.iter_mut()) {
            let gi = gi.as_f64();
            let mn = b1 * mi.as_f64() + (1.0 - b1) * gi;
            let vn = b2 * vi.as_f64() + (1.0 - b2) * gi * gi;
            *mi = T::from_f64_lossy(mn);
            *vi = T::from_f64_lossy(vn);
            let step = cfg.learning_rate * (mn / c1) / ((vn / c2).sqrt() + cfg.epsilon);
            *w = T::from_f64_lossy(w.as_f64() - step);
        }
    }
    Ok(())
}
