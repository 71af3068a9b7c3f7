//! 2-D cross-correlation and 2x2 stride-2 transposed convolution.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fault;
use crate::linalg::{gemm, MatRef};
use crate::tape::{Op, Tape, Var};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    pad: usize,
    hout: usize,
    wout: usize,
}

impl ConvGeom {
    fn new(input: &[usize], weight: &[usize], pad: usize) -> Result<Self> {
        let [n, cin, h, w] = input[..] else {
            return Err(Error::shape("conv2d", format!("input must be NCHW, got {input:?}")));
        };
        let [cout, wcin, kh, kw] = weight[..] else {
            return Err(Error::shape("conv2d", format!("weight must be [Cout,Cin,k,k], got {weight:?}")));
        };
        if kh != kw {
            return Err(Error::shape("conv2d", format!("kernel must be square, got {kh}x{kw}")));
        }
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels but weight expects {wcin}"),
            ));
        }
        let k = kh;
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!("{h}x{w} input with padding {pad} is smaller than the {k}x{k} kernel"),
            ));
        }
        Ok(ConvGeom { n, cin, h, w, cout, k, pad, hout: h + 2 * pad - k + 1, wout: w + 2 * pad - k + 1 })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.pad == 0
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.hout * self.wout
    }

    /// Items per GEMM: enough to give small planes wide matrices, few
    /// enough that the column buffer stays cache-sized for large planes.
    fn group(&self) -> usize {
        (GROUP_COLUMNS / self.out_plane()).clamp(1, self.n)
    }

    fn with_items(&self, n: usize) -> Self {
        ConvGeom { n, ..*self }
    }
}

const GROUP_COLUMNS: usize = 4096;

/// Fills one im2col row (input channel plane `src`, kernel tap `ki, kj`)
/// for a single item: `dst` has `Hout*Wout` entries.
fn unfold_row<T: Element>(src: &[T], g: &ConvGeom, ki: usize, kj: usize, dst: &mut [T]) {
    // valid output columns: 0 <= ox + kj - pad < w
    let x_lo = g.pad.saturating_sub(kj);
    let x_hi = (g.w + g.pad).saturating_sub(kj).min(g.wout);
    for oy in 0..g.hout {
        let d = &mut dst[oy * g.wout..(oy + 1) * g.wout];
        let iy = oy + ki;
        if iy < g.pad || iy - g.pad >= g.h || x_lo >= x_hi {
            d.fill(T::zero());
            continue;
        }
        let srow = &src[(iy - g.pad) * g.w..(iy - g.pad + 1) * g.w];
        d[..x_lo].fill(T::zero());
        let ix0 = x_lo + kj - g.pad;
        d[x_lo..x_hi].copy_from_slice(&srow[ix0..ix0 + (x_hi - x_lo)]);
        d[x_hi..].fill(T::zero());
    }
}

/// Adjoint of [`unfold_row`]: accumulates a column row into a channel plane.
fn fold_row<T: Element>(src: &[T], g: &ConvGeom, ki: usize, kj: usize, dst: &mut [T]) {
    let x_lo = g.pad.saturating_sub(kj);
    let x_hi = (g.w + g.pad).saturating_sub(kj).min(g.wout);
    if x_lo >= x_hi {
        return;
    }
    for oy in 0..g.hout {
        let iy = oy + ki;
        if iy < g.pad || iy - g.pad >= g.h {
            continue;
        }
        let ix0 = x_lo + kj - g.pad;
        let drow = &mut dst[(iy - g.pad) * g.w + ix0..][..x_hi - x_lo];
        let srow = &src[oy * g.wout + x_lo..oy * g.wout + x_hi];
        for (d, &s) in drow.iter_mut().zip(srow) {
            *d = *d + s;
        }
    }
}

/// Unfolds the whole batch into `[Cin*k*k, N*Hout*Wout]` columns; the
/// items sit side by side within each row.
fn im2col<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.out_plane();
    let hw = g.h * g.w;
    let mut cols = vec![T::zero(); g.patch() * g.n * plane];
    cols.par_chunks_mut(g.n * plane).enumerate().for_each(|(row, dst)| {
        let (c, tap) = (row / (g.k * g.k), row % (g.k * g.k));
        for (b, d) in dst.chunks_mut(plane).enumerate() {
            let src = &x[(b * g.cin + c) * hw..][..hw];
            if g.is_pointwise() {
                d.copy_from_slice(src);
            } else {
                unfold_row(src, g, tap / g.k, tap % g.k, d);
            }
        }
    });
    cols
}

/// Adjoint of [`im2col`].
fn col2im<T: Element>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let plane = g.out_plane();
    let hw = g.h * g.w;
    let ld = g.n * plane;
    let mut x = vec![T::zero(); g.n * g.cin * hw];
    x.par_chunks_mut(g.cin * hw).enumerate().for_each(|(b, item)| {
        for (c, dst) in item.chunks_mut(hw).enumerate() {
            for tap in 0..g.k * g.k {
                let src = &cols[(c * g.k * g.k + tap) * ld + b * plane..][..plane];
                if g.is_pointwise() {
                    dst.copy_from_slice(src);
                } else {
                    fold_row(src, g, tap / g.k, tap % g.k, dst);
                }
            }
        }
    });
    x
}

/// `[C, N*P]` (items side by side) to NCHW-ordered `[N, C, P]`.
fn unbatch<T: Element>(m: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * c * plane];
    out.par_chunks_mut(c * plane).enumerate().for_each(|(b, o)| {
        for (ch, dst) in o.chunks_mut(plane).enumerate() {
            dst.copy_from_slice(&m[(ch * n + b) * plane..][..plane]);
        }
    });
    out
}

/// Inverse of [`unbatch`].
fn batch_major<T: Element>(x: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * c * plane];
    out.par_chunks_mut(n * plane).enumerate().for_each(|(ch, o)| {
        for (b, dst) in o.chunks_mut(plane).enumerate() {
            dst.copy_from_slice(&x[(b * c + ch) * plane..][..plane]);
        }
    });
    out
}

fn check_bias<T: Element>(op: &'static str, bias: Option<&Tensor<T>>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(Error::shape(op, format!("bias must be [{channels}], got {:?}", b.shape())));
        }
    }
    Ok(())
}

fn add_bias<T: Element>(out: &mut [T], bias: Option<&Tensor<T>>, plane: usize) {
    if let Some(b) = bias {
        for (chunk, &bv) in out.chunks_mut(plane).zip(b.data().iter().cycle()) {
            for v in chunk {
                *v = *v + bv;
            }
        }
    }
}

/// Cross-correlation (no kernel flip) with symmetric zero padding.
pub fn conv2d_forward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), weight.shape(), padding)?;
    check_bias("conv2d", bias, g.cout)?;
    let plane = g.out_plane();
    let gs = g.group();
    let wmat = MatRef::row_major(weight.data(), g.cout, g.patch());
    let mut out = vec![T::zero(); g.n * g.cout * plane];
    for (o, x) in out.chunks_mut(gs * g.cout * plane).zip(input.data().chunks(gs * g.cin * g.h * g.w)) {
        let sub = g.with_items(o.len() / (g.cout * plane));
        let cols = im2col(x, &sub);
        let mut y = vec![T::zero(); g.cout * sub.n * plane];
        gemm(T::one(), wmat, MatRef::row_major(&cols, g.patch(), sub.n * plane), T::zero(), &mut y);
        o.copy_from_slice(&unbatch(&y, sub.n, g.cout, plane));
    }
    add_bias(&mut out, bias, plane);
    Tensor::from_vec(vec![g.n, g.cout, g.hout, g.wout], out)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    padding: usize,
    gout: &Tensor<T>,
    need_input: bool,
    need_weight: bool,
) -> ConvGrads<T> {
    let g = ConvGeom::new(input.shape(), weight.shape(), padding).expect("validated in forward");
    let plane = g.out_plane();
    let gs = g.group();
    let in_item = g.cin * g.h * g.w;
    let wmat = MatRef::row_major(weight.data(), g.cout, g.patch());
    let mut gw = need_weight.then(|| vec![T::zero(); weight.len()]);
    let mut gin = need_input.then(|| vec![T::zero(); input.len()]);
    for (i, (x, go)) in input.data().chunks(gs * in_item).zip(gout.data().chunks(gs * g.cout * plane)).enumerate() {
        let sub = g.with_items(x.len() / in_item);
        let ld = sub.n * plane;
        let gm = batch_major(go, sub.n, g.cout, plane);
        let gmat = MatRef::row_major(&gm, g.cout, ld);
        if let Some(acc) = &mut gw {
            // groups accumulate in a fixed order
            let cols = im2col(x, &sub);
            gemm(T::one(), gmat, MatRef::row_major(&cols, g.patch(), ld).t(), T::one(), acc);
        }
        if let Some(gin) = &mut gin {
            let mut gcols = vec![T::zero(); g.patch() * ld];
            gemm(T::one(), wmat.t(), gmat, T::zero(), &mut gcols);
            gin[i * gs * in_item..][..x.len()].copy_from_slice(&col2im(&gcols, &sub));
        }
    }
    let weight_grad = gw.map(|mut acc| {
        if fault::conv2d_backward_perturbed() {
            for a in &mut acc {
                *a = *a * T::from_f64_lossy(1.01) + T::from_f64_lossy(1e-3);
            }
        }
        Tensor::from_vec(weight.shape().to_vec(), acc).expect("weight grad shape")
    });
    let input_grad = gin.map(|d| Tensor::from_vec(input.shape().to_vec(), d).expect("input grad shape"));
    ConvGrads { input: input_grad, weight: weight_grad }
}

/// Sum of the output gradient over batch and space, per channel.
pub(crate) fn bias_grad<T: Element>(gout: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = gout.dims4("bias_grad").expect("NCHW gradient");
    let plane = h * w;
    let mut acc = vec![T::zero(); c];
    for b in 0..n {
        for (ch, a) in acc.iter_mut().enumerate() {
            let off = (b * c + ch) * plane;
            *a = *a + gout.data()[off..off + plane].iter().copied().sum::<T>();
        }
    }
    Tensor::from_vec(vec![c], acc).expect("bias grad shape")
}

fn transpose_dims(input: &[usize], weight: &[usize]) -> Result<(usize, usize, usize, usize, usize)> {
    let [n, cin, h, w] = input[..] else {
        return Err(Error::shape("conv_transpose2d", format!("input must be NCHW, got {input:?}")));
    };
    let [wcin, cout, 2, 2] = weight[..] else {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("weight must be [Cin,Cout,2,2], got {weight:?}"),
        ));
    };
    if wcin != cin {
        return Err(Error::shape(
            "conv_transpose2d",
            format!("input has {cin} channels but weight expects {wcin}"),
        ));
    }
    Ok((n, cin, h, w, cout))
}

/// Transposed convolution with a 2x2 kernel and stride 2; doubles H and W.
pub fn conv_transpose2d_forward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (n, cin, h, w, cout) = transpose_dims(input.shape(), weight.shape())?;
    check_bias("conv_transpose2d", bias, cout)?;
    let plane = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let xm = batch_major(input.data(), n, cin, plane);
    // rows (co, tap), columns (item, pixel)
    let mut yc = vec![T::zero(); cout * 4 * n * plane];
    gemm(
        T::one(),
        MatRef::row_major(weight.data(), cin, cout * 4).t(),
        MatRef::row_major(&xm, cin, n * plane),
        T::zero(),
        &mut yc,
    );
    let mut out = vec![T::zero(); n * cout * oh * ow];
    out.par_chunks_mut(cout * oh * ow).enumerate().for_each(|(b, o)| {
        for co in 0..cout {
            for tap in 0..4 {
                let (a, c) = (tap / 2, tap % 2);
                let src = &yc[(co * 4 + tap) * n * plane + b * plane..][..plane];
                for i in 0..h {
                    let orow = &mut o[co * oh * ow + (2 * i + a) * ow..][..ow];
                    for j in 0..w {
                        orow[2 * j + c] = src[i * w + j];
                    }
                }
            }
        }
        add_bias(o, bias, oh * ow);
    });
    Tensor::from_vec(vec![n, cout, oh, ow], out)
}

pub(crate) fn conv_transpose2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    gout: &Tensor<T>,
    need_input: bool,
    need_weight: bool,
) -> ConvGrads<T> {
    let (n, cin, h, w, cout) = transpose_dims(input.shape(), weight.shape()).expect("validated in forward");
    let plane = h * w;
    let ld = n * plane;
    let (oh, ow) = (2 * h, 2 * w);
    let go = gout.data();
    let mut gyc = vec![T::zero(); cout * 4 * ld];
    gyc.par_chunks_mut(ld).enumerate().for_each(|(row, dst)| {
        let (co, tap) = (row / 4, row % 4);
        let (a, c) = (tap / 2, tap % 2);
        for (b, d) in dst.chunks_mut(plane).enumerate() {
            for i in 0..h {
                let grow = &go[(b * cout + co) * oh * ow + (2 * i + a) * ow..][..ow];
                for j in 0..w {
                    d[i * w + j] = grow[2 * j + c];
                }
            }
        }
    });
    let gycmat = MatRef::row_major(&gyc, cout * 4, ld);
    let wmat = MatRef::row_major(weight.data(), cin, cout * 4);
    let input_grad = need_input.then(|| {
        let mut gin = vec![T::zero(); cin * ld];
        gemm(T::one(), wmat, gycmat, T::zero(), &mut gin);
        Tensor::from_vec(input.shape().to_vec(), unbatch(&gin, n, cin, plane)).expect("input grad shape")
    });
    let weight_grad = need_weight.then(|| {
        let xm = batch_major(input.data(), n, cin, plane);
        let mut gw = vec![T::zero(); cin * cout * 4];
        gemm(T::one(), MatRef::row_major(&xm, cin, ld), gycmat.t(), T::zero(), &mut gw);
        Tensor::from_vec(weight.shape().to_vec(), gw).expect("weight grad shape")
    });
    ConvGrads { input: input_grad, weight: weight_grad }
}

impl<T: Element> Tape<T> {
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, padding: usize) -> Result<Var> {
        let out = conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            padding,
        )?;
        self.push("conv2d", out, Op::Conv2d { input, weight, bias, padding })
    }

    pub fn conv_transpose2d(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let out = conv_transpose2d_forward(self.value(input), self.value(weight), bias.map(|b| self.value(b)))?;
        self.push("conv_transpose2d", out, Op::ConvTranspose2d { input, weight, bias })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data).unwrap()
    }

    /// Direct seven-loop reference.
    fn naive_conv(x: &Tensor<f64>, wt: &Tensor<f64>, b: Option<&Tensor<f64>>, p: usize) -> Tensor<f64> {
        let (n, cin, h, w) = x.dims4("t").unwrap();
        let (cout, _, k, _) = wt.dims4("t").unwrap();
        let (ho, wo) = (h + 2 * p - k + 1, w + 2 * p - k + 1);
        Tensor::from_fn(&[n, cout, ho, wo], |idx| {
            let ox = idx % wo;
            let oy = (idx / wo) % ho;
            let co = (idx / (wo * ho)) % cout;
            let bn = idx / (wo * ho * cout);
            let mut s = b.map_or(0.0, |b| b.data()[co]);
            for ci in 0..cin {
                for ki in 0..k {
                    for kj in 0..k {
                        let iy = oy as isize + ki as isize - p as isize;
                        let ix = ox as isize + kj as isize - p as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            s += x.data()[((bn * cin + ci) * h + iy as usize) * w + ix as usize]
                                * wt.data()[((co * cin + ci) * k + ki) * k + kj];
                        }
                    }
                }
            }
            s
        })
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let out = conv2d_forward(&Tensor::ones(&[1, 1, 3, 3]), &Tensor::<f64>::ones(&[1, 1, 3, 3]), None, 1).unwrap();
        assert_eq!(out.shape(), &[1, 1, 3, 3]);
        assert_eq!(out.data()[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(out.data()[corner], 4.0);
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let w = Tensor::from_fn(&[2, 1, 3, 3], |i| i as f64 - 4.0);
        let out = conv2d_forward(&Tensor::zeros(&[1, 1, 4, 4]), &w, None, 1).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn agrees_with_naive_loops() {
        let x = Tensor::from_fn(&[2, 3, 5, 6], |i| ((i * 37) % 11) as f64 - 5.0);
        let w = Tensor::from_fn(&[4, 3, 3, 3], |i| ((i * 13) % 7) as f64 * 0.25 - 0.7);
        let b = Tensor::from_fn(&[4], |i| i as f64);
        for p in [0, 1] {
            let fast = conv2d_forward(&x, &w, Some(&b), p).unwrap();
            let slow = naive_conv(&x, &w, Some(&b), p);
            assert!(fast.max_abs_diff(&slow) < 1e-12);
        }
        let w1 = Tensor::from_fn(&[2, 3, 1, 1], |i| i as f64 - 1.0);
        let fast = conv2d_forward(&x, &w1, None, 0).unwrap();
        assert!(fast.max_abs_diff(&naive_conv(&x, &w1, None, 0)) < 1e-12);
    }

    #[test]
    fn shape_errors_are_descriptive() {
        let err = conv2d_forward(&Tensor::<f64>::ones(&[1, 2, 4, 4]), &Tensor::ones(&[1, 3, 3, 3]), None, 1)
            .unwrap_err();
        assert!(err.to_string().contains("2 channels"), "{err}");
        assert!(conv2d_forward(&Tensor::<f64>::ones(&[1, 1, 2, 2]), &Tensor::ones(&[1, 1, 3, 3]), None, 0).is_err());
    }

    #[test]
    fn transpose_single_scatter() {
        let out = conv_transpose2d_forward(&t(&[1, 1, 1, 1], vec![2.5]), &Tensor::ones(&[1, 1, 2, 2]), None).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        assert!(out.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn transpose_quadrants() {
        let out = conv_transpose2d_forward(
            &t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]),
            &Tensor::ones(&[1, 1, 2, 2]),
            None,
        )
        .unwrap();
        #[rustfmt::skip]
        let want = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(out.data(), &want);
    }

    #[test]
    fn transpose_channel_mismatch() {
        assert!(conv_transpose2d_forward(&Tensor::<f64>::ones(&[1, 2, 2, 2]), &Tensor::ones(&[3, 1, 2, 2]), None).is_err());
    }
}
