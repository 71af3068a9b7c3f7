//! Contrast limited adaptive histogram equalization.

use crate::error::{Error, Result};
use crate::field::Field;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClaheParams {
    /// Tile grid as `(tiles_x, tiles_y)`.
    pub tiles: (usize, usize),
    /// Clip height in multiples of the uniform bin count; `f64::INFINITY` disables clipping.
    pub clip_limit: f64,
}

impl Default for ClaheParams {
    fn default() -> Self {
        ClaheParams { tiles: (8, 8), clip_limit: 2.0 }
    }
}

/// `[start, end)` of tile `k` of `n` along an axis of `len` pixels.
fn tile_span(k: usize, n: usize, len: usize) -> (usize, usize) {
    (k * len / n, (k + 1) * len / n)
}

/// Lookup table of one tile.
pub(crate) fn tile_mapping(pixels: impl Iterator<Item = u8>, clip_limit: f64) -> [u8; 256] {
    let mut hist = [0u64; 256];
    let mut total = 0u64;
    for p in pixels {
        hist[p as usize] += 1;
        total += 1;
    }
    if clip_limit.is_finite() {
        let limit = ((clip_limit * total as f64 / 256.0).floor() as u64).max(1);
        let mut excess = 0;
        for h in &mut hist {
            if *h > limit {
                excess += *h - limit;
                *h = limit;
            }
        }
        let (per_bin, rem) = (excess / 256, (excess % 256) as usize);
        for (i, h) in hist.iter_mut().enumerate() {
            *h += per_bin + u64::from(i < rem);
        }
    }
    let mut lut = [0u8; 256];
    let mut cdf = 0u64;
    let mut cdf_min = None;
    let mut cdfs = [0u64; 256];
    for (v, &h) in hist.iter().enumerate() {
        cdf += h;
        cdfs[v] = cdf;
        if cdf_min.is_none() && h > 0 {
            cdf_min = Some(cdf);
        }
    }
    let cdf_min = cdf_min.unwrap_or(0);
    for v in 0..256 {
        lut[v] = if total == cdf_min {
            // single occupied bin: nothing to equalize
            v as u8
        } else {
            let num = cdfs[v].saturating_sub(cdf_min) as f64;
            (255.0 * num / (total - cdf_min) as f64).round() as u8
        };
    }
    lut
}

/// Per-axis blend: `(tile_lo, tile_hi, weight_of_hi)` for every coordinate.
fn blend_taps(len: usize, tiles: usize) -> Vec<(usize, usize, f64)> {
    let centers: Vec<f64> = (0..tiles)
        .map(|k| {
            let (s, e) = tile_span(k, tiles, len);
            (s + e) as f64 / 2.0 - 0.5
        })
        .collect();
    (0..len)
        .map(|p| {
            let p = p as f64;
            if p <= centers[0] {
                return (0, 0, 0.0);
            }
            if p >= centers[tiles - 1] {
                return (tiles - 1, tiles - 1, 0.0);
            }
            let k = centers.iter().rposition(|&c| c <= p).unwrap();
            (k, k + 1, (p - centers[k]) / (centers[k + 1] - centers[k]))
        })
        .collect()
}

/// Tile lookup tables in row-major tile order.
pub(crate) fn tile_mappings(image: &Field<u8>, params: &ClaheParams) -> Vec<[u8; 256]> {
    let (tx, ty) = params.tiles;
    let (h, w) = image.dims();
    let mut maps = Vec::with_capacity(tx * ty);
    for ky in 0..ty {
        let (y0, y1) = tile_span(ky, ty, h);
        for kx in 0..tx {
            let (x0, x1) = tile_span(kx, tx, w);
            let px = (y0..y1).flat_map(|y| (x0..x1).map(move |x| (y, x))).map(|(y, x)| image.get(y, x));
            maps.push(tile_mapping(px, params.clip_limit));
        }
    }
    maps
}

pub fn clahe(image: &Field<u8>, params: &ClaheParams) -> Result<Field<u8>> {
    let (tx, ty) = params.tiles;
    let (h, w) = image.dims();
    if tx == 0 || ty == 0 || w < tx || h < ty {
        return Err(Error::shape("clahe", format!("{w}x{h} image is smaller than the {tx}x{ty} tile grid")));
    }
    if params.clip_limit.is_nan() || params.clip_limit <= 0.0 {
        return Err(Error::Config(format!("clip limit must be positive, got {}", params.clip_limit)));
    }
    let maps = tile_mappings(image, params);
    let ys = blend_taps(h, ty);
    let xs = blend_taps(w, tx);
    Ok(Field::from_fn(h, w, |y, x| {
        let v = image.get(y, x) as usize;
        let (ya, yb, wy) = ys[y];
        let (xa, xb, wx) = xs[x];
        let m = |ky: usize, kx: usize| maps[ky * tx + kx][v] as f64;
        let top = m(ya, xa) * (1.0 - wx) + m(ya, xb) * wx;
        let bot = m(yb, xa) * (1.0 - wx) + m(yb, xb) * wx;
        (top * (1.0 - wy) + bot * wy).round().clamp(0.0, 255.0) as u8
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg_field(h: usize, w: usize, seed: u64) -> Field<u8> {
        let mut s = seed;
        Field::from_fn(h, w, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 56) as u8
        })
    }

    #[test]
    fn two_level_single_tile_unchanged() {
        let img = Field::from_vec(2, 2, vec![0, 0, 255, 255]).unwrap();
        let p = ClaheParams { tiles: (1, 1), clip_limit: f64::INFINITY };
        assert_eq!(clahe(&img, &p).unwrap(), img);
    }

    #[test]
    fn mappings_are_monotone() {
        for seed in 0..10 {
            let img = lcg_field(40, 37, seed).map(|v| v / 3 + 40);
            for lut in tile_mappings(&img, &ClaheParams::default()) {
                assert!(lut.windows(2).all(|p| p[0] <= p[1]));
            }
        }
    }

    #[test]
    fn constant_image_stays_constant() {
        let out = clahe(&Field::filled(32, 32, 90), &ClaheParams::default()).unwrap();
        let v = out.get(0, 0);
        assert!(out.data().iter().all(|&p| p == v));
    }

    #[test]
    fn too_small_for_grid() {
        assert!(clahe(&Field::filled(4, 4, 0), &ClaheParams::default()).is_err());
    }
}
