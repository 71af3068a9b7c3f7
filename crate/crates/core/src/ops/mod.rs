//! Differentiable operations recorded on a [`Tape`](crate::tape::Tape).
//!
//! Each submodule exposes plain tensor forward functions plus the tape
//! methods that record them; backward rules stay crate-private.

pub mod conv;
pub mod loss;
pub mod nonlocal;
pub mod norm;
pub mod pointwise;
pub mod pool;
pub mod resize;
