//! Dot-product non-local means over spatial locations.
//!
//! For one batch item with C-vectors `x_i` at `N = H*W` locations,
//! `y_i = (1/N) * sum_j (x_i . x_j) x_j`. Writing `M = X X^T` (C x C) gives
//! `Y = (1/N) M X`, which costs O(N C^2) instead of O(N^2 C).

use rayon::prelude::*;

use crate::error::Result;
use crate::linalg::{gemm, MatRef};
use crate::tape::{Op, Tape, Var};
use crate::tensor::{Element, Tensor};

pub fn nonlocal_means_dot_forward<T: Element>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c, h, w) = input.dims4("nonlocal_means_dot")?;
    let n_loc = h * w;
    let inv_n = T::one() / T::from_usize(n_loc).unwrap();
    let mut out = vec![T::zero(); input.len()];
    out.par_chunks_mut(c * n_loc)
        .zip(input.data().par_chunks(c * n_loc))
        .for_each(|(y, x)| {
            let xm = MatRef::row_major(x, c, n_loc);
            let mut gram = vec![T::zero(); c * c];
            gemm(T::one(), xm, xm.t(), T::zero(), &mut gram);
            gemm(inv_n, MatRef::row_major(&gram, c, c), xm, T::zero(), y);
        });
    Tensor::from_vec(input.shape().to_vec(), out)
}

/// `dX = (1/N) [ (G X^T) X + (G X^T)^T X + M G ]` per item.
pub(crate) fn nonlocal_backward<T: Element>(input: &Tensor<T>, gout: &Tensor<T>) -> Tensor<T> {
    let (_, c, h, w) = input.dims4("nonlocal_means_dot").expect("validated in forward");
    let n_loc = h * w;
    let inv_n = T::one() / T::from_usize(n_loc).unwrap();
    let mut dx = vec![T::zero(); input.len()];
    dx.par_chunks_mut(c * n_loc)
        .zip(input.data().par_chunks(c * n_loc).zip(gout.data().par_chunks(c * n_loc)))
        .for_each(|(d, (x, g))| {
            let xm = MatRef::row_major(x, c, n_loc);
            let gm = MatRef::row_major(g, c, n_loc);
            let mut gram = vec![T::zero(); c * c];
            gemm(T::one(), xm, xm.t(), T::zero(), &mut gram);
            let mut gx = vec![T::zero(); c * c];
            gemm(T::one(), gm, xm.t(), T::zero(), &mut gx);
            // G X^T + X G^T, then one product with X
            let mut sym = vec![T::zero(); c * c];
            for i in 0..c {
                for j in 0..c {
                    sym[i * c + j] = gx[i * c + j] + gx[j * c + i];
                }
            }
            gemm(inv_n, MatRef::row_major(&sym, c, c), xm, T::zero(), d);
            gemm(inv_n, MatRef::row_major(&gram, c, c), gm, T::one(), d);
        });
    Tensor::from_vec(input.shape().to_vec(), dx).expect("nonlocal grad shape")
}

impl<T: Element> Tape<T> {
    pub fn nonlocal_means_dot(&mut self, input: Var) -> Result<Var> {
        let out = nonlocal_means_dot_forward(self.value(input))?;
        self.push("nonlocal_means_dot", out, Op::NonLocal { input })
    }
}
