//! Vessel segmentation with a UNet extended by an unsupervised Sobel
//! edge-attention prior (boundary enhancement) and non-local feature
//! denoising on skip connections.
//!
//! Everything runs on the CPU: a small reverse-mode autograd engine
//! ([`tape`]), the layers the network needs ([`ops`]), the network itself
//! ([`unet`]), data preparation ([`data`]), training ([`train`]) and
//! evaluation ([`metrics`]).

pub mod data;
pub mod denoise;
pub mod edge;
pub mod error;
pub mod fault;
pub mod field;
pub mod gradcheck;
pub mod linalg;
pub mod metrics;
pub mod ops;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod unet;
pub mod verify;


pub use edge::{AttentionMap, AttentionParams, SobelGradients};
pub use error::{Error, Result};
pub use field::Field;
pub use ops::norm::{BatchNormState, Mode};
pub use tape::{Tape, Var};
pub use tensor::{DType, Element, Tensor};
pub use unet::{Network, NetworkVariant, UNetConfig};
