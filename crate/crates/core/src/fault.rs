//! Fault injection used to prove the verification harness catches broken
//! backward rules. Thread-local, off by default.

use std::cell::Cell;

thread_local! {
    static CONV2D_BACKWARD: Cell<bool> = const { Cell::new(false) };
}

#[doc(hidden)]
pub fn perturb_conv2d_backward(on: bool) {
    CONV2D_BACKWARD.with(|c| c.set(on));
}

pub(crate) fn conv2d_backward_perturbed() -> bool {
    CONV2D_BACKWARD.with(Cell::get)
}
