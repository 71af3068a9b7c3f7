//! Bilinear resizing with the half-pixel-center convention. Not differentiated.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

struct Taps {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(out: usize, inp: usize) -> Vec<Taps> {
    let scale = inp as f64 / out as f64;
    (0..out)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
            let lo = s.floor() as usize;
            Taps { lo, hi: (lo + 1).min(inp - 1), frac: s - lo as f64 }
        })
        .collect()
}

pub fn bilinear_resize<T: Element>(input: &Tensor<T>, target_h: usize, target_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("bilinear_resize")?;
    if target_h == 0 || target_w == 0 {
        return Err(Error::shape("bilinear_resize", format!("target {target_h}x{target_w} has a zero extent")));
    }
    if (target_h, target_w) == (h, w) {
        return Ok(input.clone());
    }
    let ys = taps(target_h, h);
    let xs = taps(target_w, w);
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * target_h * target_w);
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        for ty in &ys {
            for tx in &xs {
                let v00 = src[ty.lo * w + tx.lo].as_f64();
                let v01 = src[ty.lo * w + tx.hi].as_f64();
                let v10 = src[ty.hi * w + tx.lo].as_f64();
                let v11 = src[ty.hi * w + tx.hi].as_f64();
                let top = v00 + (v01 - v00) * tx.frac;
                let bot = v10 + (v11 - v10) * tx.frac;
                out.push(T::from_f64_lossy(top + (bot - top) * ty.frac));
            }
        }
    }
    Tensor::from_vec(vec![n, c, target_h, target_w], out)
}
