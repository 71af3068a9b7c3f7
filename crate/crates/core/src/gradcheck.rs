//! Central finite-difference verification of tape gradients (64-bit only).

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates sampled per input; `None` checks every coordinate.
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-4, tolerance: 1e-5, max_coords_per_input: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub max_abs: f64,
    pub max_rel: f64,
    /// Largest per-coordinate `min(abs, rel)` deviation.
    pub worst: f64,
    /// `(input index, flat coordinate)` of the worst deviation.
    pub worst_at: (usize, usize),
    pub passed: bool,
}

/// Compares analytic gradients of the scalar program `f` against
/// `(f(x+h) - f(x-h)) / 2h` at sampled coordinates of every input.
pub fn grad_check<F>(mut f: F, inputs: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |f: &mut F, values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(Error::Tape(format!("grad_check program must be scalar, got {:?}", v.shape())));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check", index: 0 });
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, x)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradReport { checked: 0, max_abs: 0.0, max_rel: 0.0, worst: 0.0, worst_at: (0, 0), passed: true };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, x) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match cfg.max_coords_per_input {
            Some(k) if k < x.len() => sample(&mut rng, x.len(), k).into_vec(),
            _ => (0..x.len()).collect(),
        };
        for idx in coords {
            let orig = x.data()[idx];
            work[which].data_mut()[idx] = orig + cfg.step;
            let plus = eval(&mut f, &work)?;
            work[which].data_mut()[idx] = orig - cfg.step;
            let minus = eval(&mut f, &work)?;
            work[which].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic[which].data()[idx];
            let abs = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            let rel = if scale == 0.0 { 0.0 } else { abs / scale };
            report.checked += 1;
            report.max_abs = report.max_abs.max(abs);
            report.max_rel = report.max_rel.max(rel);
            let dev = abs.min(rel);
            if dev > report.worst {
                report.worst = dev;
                report.worst_at = (which, idx);
            }
        }
    }
    report.passed = report.worst <= cfg.tolerance;
    Ok(report)
}

/// Reduces a tensor-valued output to `sum_i r_i * out_i` with fixed random
/// weights `r_i` in [-1, 1], so every output element gets a distinct upstream gradient.
pub fn random_projection(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let n = tape.value(out).len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let weights = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0) * n);
    let w = tape.constant(weights);
    let prod = tape.mul(out, w)?;
    tape.reduce_mean(prod)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_derivative_is_exact() {
        let x = Tensor::from_vec(vec![1], vec![0.3]).unwrap();
        let r = grad_check(|t, v| t.reduce_mean(v[0]), &[x], &GradCheckConfig::default()).unwrap();
        assert!(r.max_abs <= 1e-10, "{r:?}");
        assert!(r.passed);
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let x = Tensor::<f64>::from_vec(vec![1], vec![0.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let s = tape.sigmoid(v).unwrap();
        let m = tape.reduce_mean(s).unwrap();
        tape.backward(m).unwrap();
        assert!((tape.grad(v).unwrap().item() - 0.25).abs() < 1e-15);
        let r = grad_check(
            |t, v| {
                let s = t.sigmoid(v[0])?;
                t.reduce_mean(s)
            },
            &[x],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu evaluated exactly at its kink has a one-sided analytic derivative
        let x = Tensor::from_vec(vec![1], vec![0.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let s = t.relu(v[0])?;
                t.reduce_mean(s)
            },
            &[x],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!r.passed);
    }
}
