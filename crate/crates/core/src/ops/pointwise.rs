//! Elementwise arithmetic and activations.
//!
//! Binary ops accept equal shapes, or an NCHW first operand with a
//! single-channel `[N,1,H,W]` second operand broadcast across channels.

use crate::error::{Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Layout {
    Same,
    /// Second operand is one plane per batch item of `plane` elements.
    ChannelBroadcast { channels: usize, plane: usize },
}

fn layout(op: &'static str, a: &[usize], b: &[usize]) -> Result<Layout> {
    if a == b {
        return Ok(Layout::Same);
    }
    match (a, b) {
        ([n, c, h, w], [bn, 1, bh, bw]) if n == bn && h == bh && w == bw => {
            Ok(Layout::ChannelBroadcast { channels: *c, plane: h * w })
        }
        _ => Err(Error::shape(op, format!("cannot broadcast {b:?} onto {a:?}"))),
    }
}

fn zip_with<T: Element>(a: &Tensor<T>, b: &Tensor<T>, lay: Layout, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = match lay {
        Layout::Same => a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        Layout::ChannelBroadcast { channels, plane } => a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let item = i / (channels * plane);
                f(x, b.data()[item * plane + i % plane])
            })
            .collect(),
    };
    Tensor::from_vec(a.shape().to_vec(), data).expect("same shape as first operand")
}

/// `g * b` with `b` broadcast to `g`'s shape.
pub(crate) fn mul_broadcast<T: Element>(g: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let lay = layout("mul", g.shape(), b.shape()).expect("validated in forward");
    zip_with(g, b, lay, |x, y| x * y)
}

pub(crate) fn mul_same<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    zip_with(a, b, Layout::Same, |x, y| x * y)
}

/// Sums a gradient of the broadcast shape back down to `shape`.
pub(crate) fn reduce_to_shape<T: Element>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let (n, c, h, w) = g.dims4("broadcast").expect("NCHW broadcast gradient");
    let plane = h * w;
    let mut out = vec![T::zero(); n * plane];
    for b in 0..n {
        for ch in 0..c {
            let src = &g.data()[(b * c + ch) * plane..][..plane];
            for (o, &s) in out[b * plane..(b + 1) * plane].iter_mut().zip(src) {
                *o = *o + s;
            }
        }
    }
    Tensor::from_vec(shape.to_vec(), out).expect("reduced gradient shape")
}

pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn relu_backward<T: Element>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    zip_with(x, g, Layout::Same, |x, g| if x > T::zero() { g } else { T::zero() })
}

pub(crate) fn sigmoid_backward<T: Element>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    zip_with(y, g, Layout::Same, |y, g| g * y * (T::one() - y))
}

impl<T: Element> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let lay = layout("add", self.value(a).shape(), self.value(b).shape())?;
        let out = zip_with(self.value(a), self.value(b), lay, |x, y| x + y);
        self.push("add", out, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let lay = layout("mul", self.value(a).shape(), self.value(b).shape())?;
        let out = zip_with(self.value(a), self.value(b), lay, |x, y| x * y);
        self.push("mul", out, Op::Mul { a, b })
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push("relu", out, Op::Relu { input })
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let out = self.value(input).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid { input })
    }

    /// Channel-wise concatenation; `a`'s channels come first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = concat_channels(self.value(a), self.value(b))?;
        self.push("concat_channels", out, Op::Concat { a, b })
    }

    /// Mean over all elements, as a scalar.
    pub fn reduce_mean(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        if x.is_empty() {
            return Err(Error::shape("reduce_mean", "empty tensor"));
        }
        let s: f64 = x.data().iter().map(|v| v.as_f64()).sum();
        let out = Tensor::scalar(T::from_f64_lossy(s / x.len() as f64));
        self.push("reduce_mean", out, Op::Mean { input })
    }
}

pub fn concat_channels<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.dims4("concat_channels")?;
    let (nb, cb, hb, wb) = b.dims4("concat_channels")?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape(
            "concat_channels",
            format!("cannot concatenate {:?} with {:?}", a.shape(), b.shape()),
        ));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(a.len() + b.len());
    for item in 0..n {
        data.extend_from_slice(&a.data()[item * ca * plane..(item + 1) * ca * plane]);
        data.extend_from_slice(&b.data()[item * cb * plane..(item + 1) * cb * plane]);
    }
    Tensor::from_vec(vec![n, ca + cb, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_mul_hits_every_channel() {
        let mut tape = Tape::<f64>::new();
        let f = tape.constant(Tensor::full(&[1, 2, 2, 2], 3.0));
        let m = tape.constant(Tensor::full(&[1, 1, 2, 2], 2.0));
        let y = tape.mul(f, m).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 6.0));
        assert_eq!(tape.value(y).shape(), &[1, 2, 2, 2]);
    }

    #[test]
    fn activations() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(vec![2], vec![-5.0, 5.0]).unwrap());
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 5.0]);
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0 && sigmoid(800.0f64) == 1.0);
        assert!(sigmoid(-800.0f32).is_finite());
    }

    #[test]
    fn incompatible_shapes_are_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::ones(&[1, 2, 2, 2]));
        let b = tape.constant(Tensor::ones(&[1, 2, 2, 1]));
        assert!(tape.add(a, b).is_err());
        let c = tape.constant(Tensor::ones(&[1, 2, 2, 3]));
        assert!(tape.concat_channels(a, c).is_err());
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let a = Tensor::<f64>::from_fn(&[2, 2, 3, 3], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[2, 3, 3, 3], |i| -(i as f64));
        let cat = concat_channels(&a, &b).unwrap();
        assert_eq!(cat.shape(), &[2, 5, 3, 3]);
        assert_eq!(cat.slice_channels(0, 2).unwrap(), a);
        assert_eq!(cat.slice_channels(2, 3).unwrap(), b);
    }

    #[test]
    fn mean_values() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_vec(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let m = tape.reduce_mean(x).unwrap();
        assert_eq!(tape.value(m).item(), 2.5);
        tape.backward(m).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 0.25));
        let c = tape.constant(Tensor::full(&[3, 3], 1.75));
        let mc = tape.reduce_mean(c);
        assert!(mc.is_err(), "recording after backward must fail");
        let mut t2 = Tape::<f64>::new();
        let c = t2.constant(Tensor::full(&[3, 3], 1.75));
        let mc = t2.reduce_mean(c).unwrap();
        assert_eq!(t2.value(mc).item(), 1.75);
    }
}
