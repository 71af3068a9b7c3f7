//! Image I/O, preprocessing, augmentation and the synthetic vessel dataset.

mod clahe;
mod manifest;
mod pnm;
mod prepare;
pub mod raster;
mod synth;

pub use clahe::{clahe, ClaheParams};
pub use manifest::{DatasetManifest, ManifestEntry, Split};
pub use pnm::{decode_pnm, encode_pnm, read_pnm, write_pgm, write_pnm, ImageU8};
pub use prepare::{
    attention_input, augment_flip, binarize, crop_back, flip_horizontal, flip_vertical, load_sample, normalize, pad_to_divisible,
    prepare_sample, preprocess, to_gray,
    PadRecord, Sample,
};
pub use synth::{synth_generate, synth_image, SynthImage};
