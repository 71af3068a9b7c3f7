//! Binary cross-entropy on logits.

use crate::error::{Error, Result};
use crate::ops::pointwise::sigmoid;
use crate::tape::{Op, Tape, Var};
use crate::tensor::{Element, Tensor};

/// Per-pixel loss `max(z,0) - z*y + ln(1 + exp(-|z|))`.
pub fn bce_with_logits_pixel(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

fn validate<T: Element>(logits: &Tensor<T>, targets: &Tensor<T>, mask: Option<&Tensor<T>>) -> Result<usize> {
    if logits.shape() != targets.shape() {
        return Err(Error::shape(
            "bce_loss",
            format!("logits {:?} vs targets {:?}", logits.shape(), targets.shape()),
        ));
    }
    let count = match mask {
        Some(m) => {
            if m.shape() != logits.shape() {
                return Err(Error::shape("bce_loss", format!("mask {:?} vs logits {:?}", m.shape(), logits.shape())));
            }
            m.data().iter().filter(|&&v| v != T::zero()).count()
        }
        None => logits.len(),
    };
    if count == 0 {
        return Err(Error::shape("bce_loss", "every pixel is masked out"));
    }
    Ok(count)
}

pub(crate) fn bce_backward<T: Element>(
    logits: &Tensor<T>,
    targets: &Tensor<T>,
    mask: Option<&Tensor<T>>,
    count: usize,
    gout: T,
) -> Tensor<T> {
    let scale = gout / T::from_usize(count).unwrap();
    Tensor::from_fn(logits.shape(), |i| {
        if mask.is_some_and(|m| m.data()[i] == T::zero()) {
            T::zero()
        } else {
            (sigmoid(logits.data()[i]) - targets.data()[i]) * scale
        }
    })
}

impl<T: Element> Tape<T> {
    /// Mean binary cross-entropy over unmasked pixels; `mask` entries are 0 or 1.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor<T>, mask: Option<Tensor<T>>) -> Result<Var> {
        let z = self.value(logits);
        let count = validate(z, &targets, mask.as_ref())?;
        let mut sum = 0.0f64;
        for (i, (&zi, &yi)) in z.data().iter().zip(targets.data()).enumerate() {
            if mask.as_ref().is_some_and(|m| m.data()[i] == T::zero()) {
                continue;
            }
            sum += bce_with_logits_pixel(zi.as_f64(), yi.as_f64());
        }
        let out = Tensor::scalar(T::from_f64_lossy(sum / count as f64));
        self.push("bce_loss", out, Op::BceWithLogits { logits, targets, mask, count })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_of(z: f64, y: f64) -> f64 {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::full(&[1, 1, 1, 1], z));
        let out = tape.bce_with_logits(l, Tensor::full(&[1, 1, 1, 1], y), None).unwrap();
        tape.value(out).item()
    }

    #[test]
    fn known_values() {
        assert!((loss_of(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(loss_of(40.0, 1.0) < 1e-15);
        assert!((loss_of(-40.0, 1.0) - 40.0).abs() < 1e-12);
        assert!(loss_of(1e4, 0.0).is_finite());
    }

    #[test]
    fn mask_restricts_mean() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::from_vec(vec![1, 1, 1, 2], vec![0.0, 100.0]).unwrap());
        let y = Tensor::from_vec(vec![1, 1, 1, 2], vec![1.0, 0.0]).unwrap();
        let m = Tensor::from_vec(vec![1, 1, 1, 2], vec![1.0, 0.0]).unwrap();
        let out = tape.bce_with_logits(l, y, Some(m)).unwrap();
        assert!((tape.value(out).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let l = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let err = tape.bce_with_logits(l, Tensor::zeros(&[1, 1, 2, 2]), Some(Tensor::zeros(&[1, 1, 2, 2])));
        assert!(err.is_err());
    }
}
