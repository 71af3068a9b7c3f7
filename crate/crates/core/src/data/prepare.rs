//! Preprocessing (grayscale, CLAHE, [0,1] scaling), flips and padding.

use std::path::Path;

use rand::Rng;

use crate::data::clahe::{clahe, ClaheParams};
use crate::data::pnm::{read_pnm, ImageU8};
use crate::edge::{edge_attention, AttentionMap, AttentionParams};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::tensor::Tensor;

/// Where a sample was padded, so predictions can be cropped back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PadRecord {
    pub height: usize,
    pub width: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[1, 1, H, W]` in [0, 1].
    pub image: Tensor<f32>,
    /// 0/1 per pixel.
    pub label: Field<u8>,
    /// 0/1 field-of-view mask; `None` means every pixel counts.
    pub mask: Option<Field<u8>>,
    /// Edge attention computed from `image`, when the network needs it.
    pub attention: Option<AttentionMap>,
    pub pad: PadRecord,
}

impl Sample {
    pub fn dims(&self) -> (usize, usize) {
        self.label.dims()
    }
}

/// Green channel of an RGB image, or the single channel of a gray one.
pub fn to_gray(image: &ImageU8) -> Field<u8> {
    image.channel(if image.channels == 3 { 1 } else { 0 })
}

/// `[1, 1, H, W]` tensor of `value / 255`; RGB input is reduced to green.
pub fn normalize(image: &ImageU8) -> Tensor<f32> {
    let g = to_gray(image);
    Tensor::from_vec(vec![1, 1, g.height(), g.width()], g.data().iter().map(|&v| v as f32 / 255.0).collect())
        .expect("image extents are positive")
}

/// Grayscale reduction followed by CLAHE.
pub fn preprocess(image: &ImageU8, params: &ClaheParams) -> Result<ImageU8> {
    Ok(ImageU8::gray(&clahe(&to_gray(image), params)?))
}

/// The field edge attention is computed from: CLAHE output scaled to [0, 1].
pub fn attention_input(image: &ImageU8, params: &ClaheParams) -> Result<Field<f64>> {
    let g = clahe(&to_gray(image), params)?;
    Ok(g.map(|v| f64::from(v as f32 / 255.0)))
}

/// Foreground iff the first channel exceeds 127.
pub fn binarize(image: &ImageU8) -> Field<u8> {
    image.channel(0).map(|v| u8::from(v > 127))
}

/// Builds a padded sample from raw images. `label` defaults to all background.
pub fn prepare_sample(
    image: &ImageU8,
    label: Option<&ImageU8>,
    mask: Option<&ImageU8>,
    clahe_params: &ClaheParams,
    divisor: usize,
    attention: Option<&AttentionParams>,
) -> Result<Sample> {
    let (h, w) = (image.height, image.width);
    for (what, other) in [("label", label), ("mask", mask)] {
        if let Some(o) = other {
            if (o.height, o.width) != (h, w) {
                return Err(Error::shape(
                    "prepare_sample",
                    format!("{what} is {}x{} but image is {w}x{h}", o.width, o.height),
                ));
            }
        }
    }
    let pre = preprocess(image, clahe_params)?;
    let tensor = normalize(&pre);
    let attention = attention.map(|p| {
        let f = Field::from_vec(h, w, tensor.data().iter().map(|&v| v as f64).collect()).expect("dims");
        edge_attention(&f, p)
    });
    let sample = Sample {
        image: tensor,
        label: label.map_or_else(|| Field::filled(h, w, 0), binarize),
        mask: mask.map(binarize),
        attention,
        pad: PadRecord { height: h, width: w, pad_bottom: 0, pad_right: 0 },
    };
    pad_to_divisible(&sample, divisor)
}

/// Reads and prepares one manifest record.
pub fn load_sample(
    image: &Path,
    label: Option<&Path>,
    mask: Option<&Path>,
    clahe_params: &ClaheParams,
    divisor: usize,
    attention: Option<&AttentionParams>,
) -> Result<Sample> {
    let img = read_pnm(image)?;
    let lbl = label.map(read_pnm).transpose()?;
    let msk = mask.map(read_pnm).transpose()?;
    prepare_sample(&img, lbl.as_ref(), msk.as_ref(), clahe_params, divisor, attention)
}

fn flip_tensor(t: &Tensor<f32>, horizontal: bool) -> Tensor<f32> {
    let s = t.shape();
    let (h, w) = (s[2], s[3]);
    let d = t.data();
    Tensor::from_fn(s, |i| {
        let plane = i / (h * w);
        let (y, x) = ((i / w) % h, i % w);
        let (sy, sx) = if horizontal { (y, w - 1 - x) } else { (h - 1 - y, x) };
        d[plane * h * w + sy * w + sx]
    })
}

fn flip(sample: &Sample, horizontal: bool) -> Sample {
    let f = |fl: &Field<u8>| if horizontal { fl.flip_horizontal() } else { fl.flip_vertical() };
    Sample {
        image: flip_tensor(&sample.image, horizontal),
        label: f(&sample.label),
        mask: sample.mask.as_ref().map(f),
        attention: sample
            .attention
            .as_ref()
            .map(|a| if horizontal { a.flip_horizontal() } else { a.flip_vertical() }),
        pad: sample.pad,
    }
}

pub fn flip_horizontal(sample: &Sample) -> Sample {
    flip(sample, true)
}

pub fn flip_vertical(sample: &Sample) -> Sample {
    flip(sample, false)
}

/// Independent horizontal and vertical flips, each with probability 1/2.
/// Always draws exactly two values from `rng`.
pub fn augment_flip(sample: &Sample, rng: &mut impl Rng) -> Sample {
    let h = rng.random_bool(0.5);
    let v = rng.random_bool(0.5);
    let mut out = if h { flip_horizontal(sample) } else { sample.clone() };
    if v {
        out = flip_vertical(&out);
    }
    out
}

/// Mirror index without edge repetition (`... 2 1 | 0 1 2 ... n-1 | n-2 ...`).
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

fn pad_reflect<T: Copy>(f: &Field<T>, h: usize, w: usize) -> Field<T> {
    let (fh, fw) = f.dims();
    Field::from_fn(h, w, |y, x| f.get(reflect(y, fh), reflect(x, fw)))
}

fn pad_zero(f: &Field<u8>, h: usize, w: usize) -> Field<u8> {
    let (fh, fw) = f.dims();
    Field::from_fn(h, w, |y, x| if y < fh && x < fw { f.get(y, x) } else { 0 })
}

/// Pads on the right and bottom up to multiples of `divisor` (a power of two).
/// Image and attention are reflected; label and mask are zero-padded, and a
/// mask is created when padding is needed so the padded band is never scored.
pub fn pad_to_divisible(sample: &Sample, divisor: usize) -> Result<Sample> {
    if !divisor.is_power_of_two() {
        return Err(Error::Config(format!("pad divisor must be a power of two, got {divisor}")));
    }
    let (h, w) = sample.dims();
    let (ph, pw) = (h.div_ceil(divisor) * divisor, w.div_ceil(divisor) * divisor);
    if (ph, pw) == (h, w) {
        return Ok(sample.clone());
    }
    let c = sample.image.shape()[1];
    let mut data = Vec::with_capacity(c * ph * pw);
    for ch in 0..c {
        let plane = Field::from_vec(h, w, sample.image.data()[ch * h * w..(ch + 1) * h * w].to_vec())?;
        data.extend(pad_reflect(&plane, ph, pw).into_data());
    }
    let mask = match &sample.mask {
        Some(m) => pad_zero(m, ph, pw),
        None => pad_zero(&Field::filled(h, w, 1), ph, pw),
    };
    Ok(Sample {
        image: Tensor::from_vec(vec![1, c, ph, pw], data)?,
        label: pad_zero(&sample.label, ph, pw),
        mask: Some(mask),
        attention: sample
            .attention
            .as_ref()
            .map(|a| AttentionMap { weights: pad_reflect(&a.weights, ph, pw), source_dims: (ph, pw) }),
        pad: PadRecord {
            height: sample.pad.height,
            width: sample.pad.width,
            pad_bottom: ph - sample.pad.height,
            pad_right: pw - sample.pad.width,
        },
    })
}

/// Crops a padded-size prediction back to the original extents.
pub fn crop_back<T: Copy>(pred: &Field<T>, pad: &PadRecord) -> Field<T> {
    pred.crop(pad.height, pad.width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn blank_sample(h: usize, w: usize) -> Sample {
        Sample {
            image: Tensor::from_fn(&[1, 1, h, w], |i| (i % 251) as f32 / 251.0),
            label: Field::from_fn(h, w, |y, x| u8::from((y * 7 + x * 3) % 5 == 0)),
            mask: None,
            attention: None,
            pad: PadRecord { height: h, width: w, pad_bottom: 0, pad_right: 0 },
        }
    }

    #[test]
    fn normalize_values() {
        let gray = ImageU8::new(2, 1, 1, vec![0, 255]).unwrap();
        assert_eq!(normalize(&gray).data(), &[0.0, 1.0]);
        let rgb = ImageU8::new(1, 1, 3, vec![10, 200, 30]).unwrap();
        assert_eq!(normalize(&rgb).data(), &[200.0 / 255.0]);
    }

    #[test]
    fn normalize_round_trips_green() {
        let mut s = 17u64;
        let px: Vec<u8> = (0..5 * 7 * 3)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
                (s >> 56) as u8
            })
            .collect();
        let img = ImageU8::new(5, 7, 3, px).unwrap();
        let t = normalize(&img);
        let back: Vec<u8> = t.data().iter().map(|&v| (v * 255.0).round() as u8).collect();
        assert_eq!(back, img.channel(1).into_data());
    }

    #[test]
    fn double_flip_is_identity() {
        let s = blank_sample(6, 5);
        assert_eq!(flip_horizontal(&flip_horizontal(&s)), s);
        assert_eq!(flip_vertical(&flip_vertical(&s)), s);
        assert_eq!(flip_horizontal(&s).label.count_nonzero(), s.label.count_nonzero());
    }

    #[test]
    fn seeded_flips_reproduce() {
        let s = blank_sample(4, 4);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..100).map(|_| augment_flip(&s, &mut rng).label).collect::<Vec<_>>()
        };
        assert_eq!(run(5), run(5));
    }

    #[test]
    fn padding_arithmetic_and_crop() {
        let s = blank_sample(64, 64);
        assert_eq!(pad_to_divisible(&s, 16).unwrap(), s);
        let s = blank_sample(584, 565);
        let p = pad_to_divisible(&s, 16).unwrap();
        assert_eq!(p.dims(), (592, 576));
        assert_eq!((p.pad.pad_right, p.pad.pad_bottom), (11, 8));
        assert_eq!(crop_back(&p.label, &p.pad), s.label);
        let mask = p.mask.as_ref().unwrap();
        assert_eq!(mask.count_nonzero(), 584 * 565);
        assert!(pad_to_divisible(&s, 12).is_err());
    }

    #[test]
    fn reflection_does_not_repeat_edge() {
        assert_eq!((0..7).map(|i| reflect(i, 3)).collect::<Vec<_>>(), vec![0, 1, 2, 1, 0, 1, 2]);
        assert_eq!(reflect(5, 1), 0);
    }
}
