//! 2x2 max pooling with stride 2.

use crate::error::{Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::{Element, Tensor};

/// Returns the pooled tensor and, per output element, the flat input index of
/// the window maximum. Ties go to the first element in row-major window order.
pub fn maxpool2d_forward<T: Element>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let (n, c, h, w) = input.dims4("maxpool2d")?;
    if h % 2 != 0 {
        return Err(Error::shape("maxpool2d", format!("height {h} is odd")));
    }
    if w % 2 != 0 {
        return Err(Error::shape("maxpool2d", format!("width {w} is odd")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let top = base + 2 * i * w + 2 * j;
                let mut best = top;
                for cand in [top + 1, top + w, top + w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                argmax.push(best as u32);
            }
        }
    }
    Ok((Tensor::from_vec(vec![n, c, oh, ow], out)?, argmax))
}

pub(crate) fn maxpool2d_backward<T: Element>(input_shape: &[usize], argmax: &[u32], gout: &Tensor<T>) -> Tensor<T> {
    let mut g = Tensor::zeros(input_shape);
    let gd = g.data_mut();
    for (&idx, &go) in argmax.iter().zip(gout.data()) {
        gd[idx as usize] = gd[idx as usize] + go;
    }
    g
}

impl<T: Element> Tape<T> {
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = maxpool2d_forward(self.value(input))?;
        self.push("maxpool2d", out, Op::MaxPool2d { input, argmax })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_window_max() {
        let x = Tensor::from_vec(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2d_forward(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);
    }

    #[test]
    fn constant_input_routes_to_first_cell() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::full(&[1, 2, 4, 4], 7.0));
        let y = tape.maxpool2d(x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 7.0));
        let loss = tape.reduce_mean(y).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        let nonzero = g.data().iter().filter(|&&v| v != 0.0).count();
        assert_eq!(nonzero, 8);
        // top-left of every window
        for plane in 0..2 {
            for (i, j) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
                assert!(g.data()[plane * 16 + i * 4 + j] > 0.0);
            }
        }
    }

    #[test]
    fn odd_extent_names_dimension() {
        let err = maxpool2d_forward(&Tensor::<f64>::ones(&[1, 1, 4, 5])).unwrap_err();
        assert!(err.to_string().contains("width 5"), "{err}");
        let err = maxpool2d_forward(&Tensor::<f64>::ones(&[1, 1, 3, 4])).unwrap_err();
        assert!(err.to_string().contains("height 3"), "{err}");
    }
}
