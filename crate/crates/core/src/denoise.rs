//! Feature-denoising block: dot-product non-local means, a 1x1
//! convolution and a residual connection, `y = x + conv1x1(nlm(x))`.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// Largest location count accepted by [`nonlocal_bruteforce`].
pub const BRUTEFORCE_MAX_LOCATIONS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiseBlock<T> {
    pub channels: usize,
    pub conv_weight: Tensor<T>,
    pub conv_bias: Tensor<T>,
}

impl<T: Element> DenoiseBlock<T> {
    /// Zero-initialized block; starts out as the identity.
    pub fn new(channels: usize) -> Self {
        DenoiseBlock {
            channels,
            conv_weight: Tensor::zeros(&[channels, channels, 1, 1]),
            conv_bias: Tensor::zeros(&[channels]),
        }
    }

    /// Records the block with its parameters as trainable leaves.
    /// Returns `(output, weight var, bias var)`.
    pub fn forward(&self, tape: &mut Tape<T>, features: Var) -> Result<(Var, Var, Var)> {
        let w = tape.param(self.conv_weight.clone());
        let b = tape.param(self.conv_bias.clone());
        let y = denoise_forward(tape, features, w, b)?;
        Ok((y, w, b))
    }
}

pub fn denoise_forward<T: Element>(tape: &mut Tape<T>, features: Var, weight: Var, bias: Var) -> Result<Var> {
    let c = tape.value(features).dims4("denoise")?.1;
    let ws = tape.value(weight).shape();
    if ws != [c, c, 1, 1] {
        return Err(Error::shape("denoise", format!("block expects [{c},{c},1,1] weights for {c} channels, got {ws:?}")));
    }
    let nl = tape.nonlocal_means_dot(features)?;
    let fused = tape.conv2d(nl, weight, Some(bias), 0)?;
    tape.add(features, fused)
}

/// Literal O(N^2 C) double loop; reference for the Gram-matrix path.
pub fn nonlocal_bruteforce(features: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (n, c, h, w) = features.dims4("nonlocal_bruteforce")?;
    let locs = h * w;
    if locs > BRUTEFORCE_MAX_LOCATIONS {
        return Err(Error::shape(
            "nonlocal_bruteforce",
            format!("{locs} locations exceeds the limit of {BRUTEFORCE_MAX_LOCATIONS}"),
        ));
    }
    let x = features.data();
    let at = |b: usize, ch: usize, i: usize| x[(b * c + ch) * locs + i];
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for i in 0..locs {
            for j in 0..locs {
                let dot: f64 = (0..c).map(|ch| at(b, ch, i) * at(b, ch, j)).sum();
                for ch in 0..c {
                    out[(b * c + ch) * locs + i] += dot * at(b, ch, j);
                }
            }
            for ch in 0..c {
                out[(b * c + ch) * locs + i] /= locs as f64;
            }
        }
    }
    Tensor::from_vec(features.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::nonlocal::nonlocal_means_dot_forward;

    #[test]
    fn two_location_hand_case() {
        let x = Tensor::from_vec(vec![1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        assert_eq!(nonlocal_means_dot_forward(&x).unwrap().data(), &[2.5, 5.0]);
        assert_eq!(nonlocal_bruteforce(&x).unwrap().data(), &[2.5, 5.0]);
    }

    #[test]
    fn zeros_stay_zero() {
        let x = Tensor::<f64>::zeros(&[2, 3, 2, 2]);
        assert!(nonlocal_means_dot_forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(nonlocal_bruteforce(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_location_collapses() {
        let x = Tensor::from_vec(vec![1, 3, 1, 1], vec![1.0, -2.0, 0.5]).unwrap();
        let norm2 = 1.0 + 4.0 + 0.25;
        let y = nonlocal_bruteforce(&x).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - norm2 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn bruteforce_size_limit() {
        assert!(nonlocal_bruteforce(&Tensor::ones(&[1, 1, 8, 9])).is_err());
        assert!(nonlocal_bruteforce(&Tensor::ones(&[1, 1, 8, 8])).is_ok());
    }

    #[test]
    fn zero_block_is_identity() {
        let x = Tensor::<f64>::from_fn(&[2, 4, 3, 3], |i| (i as f64 * 0.7).cos());
        let block = DenoiseBlock::new(4);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let (y, _, _) = block.forward(&mut tape, v).unwrap();
        assert_eq!(tape.value(y), &x);
        let z = tape.constant(Tensor::zeros(&[1, 4, 2, 2]));
        let (yz, _, _) = block.forward(&mut tape, z).unwrap();
        assert!(tape.value(yz).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch() {
        let block = DenoiseBlock::<f64>::new(3);
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::ones(&[1, 4, 2, 2]));
        assert!(block.forward(&mut tape, v).is_err());
    }
}
