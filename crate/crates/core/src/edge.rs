//! Unsupervised boundary prior: Sobel gradient magnitude mapped to a
//! per-pixel attention weight, resized and multiplied into encoder features.

use crate::error::{Error, Result};
use crate::field::Field;
use crate::ops::resize::bilinear_resize;
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SobelGradients {
    pub gx: Field<f64>,
    pub gy: Field<f64>,
    pub magnitude: Field<f64>,
}

/// Smoothing taps shared by both kernels: `[-1 0 1; -2 0 2; -1 0 1]` is
/// `[1 2 1]^T` times a central difference, and the vertical kernel is its transpose.
const SMOOTH: [f64; 3] = [1.0, 2.0, 1.0];

/// Sobel responses by cross-correlation with edge-replicated borders.
pub fn sobel(image: &Field<f64>) -> SobelGradients {
    let (h, w) = image.dims();
    let mut gx = Field::filled(h, w, 0.0);
    let mut gy = Field::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let (yi, xi) = (y as isize, x as isize);
            let (mut sx, mut sy) = (0.0, 0.0);
            for (d, &k) in SMOOTH.iter().enumerate() {
                let o = d as isize - 1;
                sx += k * (image.get_clamped(yi + o, xi + 1) - image.get_clamped(yi + o, xi - 1));
                sy += k * (image.get_clamped(yi + 1, xi + o) - image.get_clamped(yi - 1, xi + o));
            }
            gx.set(y, x, sx);
            gy.set(y, x, sy);
        }
    }
    let magnitude = Field::from_fn(h, w, |y, x| {
        let (a, b) = (gx.get(y, x), gy.get(y, x));
        (a * a + b * b).sqrt()
    });
    SobelGradients { gx, gy, magnitude }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionParams {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for AttentionParams {
    fn default() -> Self {
        AttentionParams { lambda_min: 0.8, lambda_max: 5.0, alpha: 2.0, beta: 1.0 }
    }
}

impl AttentionParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_min < self.lambda_max && self.alpha >= 0.0 && self.beta > 0.0;
        let finite = [self.lambda_min, self.lambda_max, self.alpha, self.beta].iter().all(|v| v.is_finite());
        if ok && finite {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "attention parameters need lambda_min < lambda_max, alpha >= 0, beta > 0; got {self:?}"
            )))
        }
    }

    /// Weight for one gradient magnitude. Values strictly outside
    /// `[lambda_min, lambda_max]` get 1; inside, weak edges get up to `alpha + beta`.
    pub fn weight(&self, g: f64) -> f64 {
        if g > self.lambda_max || g < self.lambda_min {
            1.0
        } else {
            (1.0 - (g - self.lambda_min) / (self.lambda_max - self.lambda_min)) * self.alpha + self.beta
        }
    }
}

/// Per-pixel edge weights plus the extents of the image they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub weights: Field<f64>,
    pub source_dims: (usize, usize),
}

impl AttentionMap {
    pub fn dims(&self) -> (usize, usize) {
        self.weights.dims()
    }

    pub fn flip_horizontal(&self) -> Self {
        AttentionMap { weights: self.weights.flip_horizontal(), source_dims: self.source_dims }
    }

    pub fn flip_vertical(&self) -> Self {
        AttentionMap { weights: self.weights.flip_vertical(), source_dims: self.source_dims }
    }
}

pub fn attention_transform(grad: &SobelGradients, params: &AttentionParams) -> AttentionMap {
    AttentionMap { weights: grad.magnitude.map(|g| params.weight(g)), source_dims: grad.magnitude.dims() }
}

/// Sobel followed by the attention transform.
pub fn edge_attention(image: &Field<f64>, params: &AttentionParams) -> AttentionMap {
    attention_transform(&sobel(image), params)
}

/// One bilinear-resized copy of `map` per requested `(height, width)`.
pub fn attention_pyramid(map: &AttentionMap, levels: &[(usize, usize)]) -> Result<Vec<AttentionMap>> {
    let (h, w) = map.dims();
    let src = Tensor::from_vec(vec![1, 1, h, w], map.weights.data().to_vec())?;
    levels
        .iter()
        .map(|&(lh, lw)| {
            let r = bilinear_resize(&src, lh, lw)?;
            Ok(AttentionMap { weights: Field::from_vec(lh, lw, r.into_data())?, source_dims: map.source_dims })
        })
        .collect()
}

/// Multiplies NCHW `features` by one attention map per batch item,
/// broadcast across channels. Gradients flow to `features` only.
pub fn apply_attention<T: Element>(tape: &mut Tape<T>, features: Var, maps: &[&AttentionMap]) -> Result<Var> {
    let (n, _, h, w) = tape.value(features).dims4("apply_attention")?;
    if maps.len() != n {
        return Err(Error::shape("apply_attention", format!("{} attention maps for a batch of {n}", maps.len())));
    }
    let mut data = Vec::with_capacity(n * h * w);
    for m in maps {
        if m.dims() != (h, w) {
            return Err(Error::shape(
                "apply_attention",
                format!("attention map is {:?} but features are {h}x{w}", m.dims()),
            ));
        }
        data.extend(m.weights.data().iter().map(|&v| T::from_f64_lossy(v)));
    }
    let map = tape.constant(Tensor::from_vec(vec![n, 1, h, w], data)?);
    tape.mul(features, map)
}
