//! Synthetic fundus-like vessel images with exact labels.
//!
//! Each image holds 3 to 8 branching vessel trees drawn as smooth random
//! walks whose width tapers from up to 6 px down to 1 px, darker than a
//! smoothly varying background by a per-tree contrast in [0.15, 0.5], plus
//! Gaussian noise with sigma 0.05.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::manifest::{DatasetManifest, ManifestEntry, Split};
use crate::data::pnm::write_pgm;
use crate::error::{Error, Result};
use crate::field::Field;

const NOISE_SIGMA: f64 = 0.05;
const MAX_TURN: f64 = 0.12;
const STEP: f64 = 1.0;
const MIN_FOREGROUND: f64 = 0.02;
const MAX_FOREGROUND: f64 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub image: Field<u8>,
    /// 0/1 vessel mask.
    pub label: Field<u8>,
}

struct Stroke {
    points: Vec<(f64, f64)>,
    widths: Vec<f64>,
}

/// Marks pixels whose centre lies within `width / 2` of segment `a`-`b`.
fn rasterize_segment(mask: &mut Field<u8>, a: (f64, f64), b: (f64, f64), width: f64) {
    let r = width / 2.0;
    let (h, w) = mask.dims();
    let y0 = (a.0.min(b.0) - r).floor().max(0.0) as usize;
    let y1 = ((a.0.max(b.0) + r).ceil() as isize).clamp(0, h as isize - 1) as usize;
    let x0 = (a.1.min(b.1) - r).floor().max(0.0) as usize;
    let x1 = ((a.1.max(b.1) + r).ceil() as isize).clamp(0, w as isize - 1) as usize;
    let (dy, dx) = (b.0 - a.0, b.1 - a.1);
    let len2 = dy * dy + dx * dx;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (py, px) = (y as f64 - a.0, x as f64 - a.1);
            let t = if len2 > 0.0 { ((py * dy + px * dx) / len2).clamp(0.0, 1.0) } else { 0.0 };
            let (ey, ex) = (py - t * dy, px - t * dx);
            if ey * ey + ex * ex <= r * r + 1e-9 {
                mask.set(y, x, 1);
            }
        }
    }
}

fn walk(rng: &mut ChaCha8Rng, start: (f64, f64), heading: f64, length: usize, w0: f64, h: usize, w: usize) -> Stroke {
    let mut points = vec![start];
    let mut widths = vec![w0];
    let (mut p, mut theta) = (start, heading);
    let drift = rng.random_range(-0.5..0.5) * MAX_TURN;
    for i in 1..=length {
        theta += drift + rng.random_range(-MAX_TURN..MAX_TURN);
        p = (p.0 + STEP * theta.sin(), p.1 + STEP * theta.cos());
        if p.0 < -2.0 || p.1 < -2.0 || p.0 > h as f64 + 1.0 || p.1 > w as f64 + 1.0 {
            break;
        }
        points.push(p);
        let frac = i as f64 / length as f64;
        widths.push((w0 * (1.0 - frac) + frac).max(1.0));
    }
    Stroke { points, widths }
}

fn grow_tree(rng: &mut ChaCha8Rng, h: usize, w: usize, out: &mut Vec<Stroke>) {
    let size = h.min(w) as f64;
    let start = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
    let heading = rng.random_range(0.0..TAU);
    let w0 = rng.random_range(2..=6) as f64;
    let length = (size * rng.random_range(0.25..0.6)) as usize;
    let trunk = walk(rng, start, heading, length, w0, h, w);
    let n_branches = rng.random_range(0..=2);
    let mut branches = Vec::new();
    for _ in 0..n_branches {
        if trunk.points.len() < 6 {
            break;
        }
        let at = rng.random_range(trunk.points.len() / 4..trunk.points.len() * 3 / 4);
        let bw = (trunk.widths[at] - 1.0).max(1.0);
        let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let bh = heading + side * rng.random_range(0.5..1.1);
        let blen = (length as f64 * rng.random_range(0.3..0.6)) as usize;
        branches.push(walk(rng, trunk.points[at], bh, blen.max(2), bw, h, w));
    }
    out.push(trunk);
    out.extend(branches);
}

/// One synthetic image/label pair, deterministic in `rng`'s state.
pub fn synth_image(height: usize, width: usize, rng: &mut ChaCha8Rng) -> Result<SynthImage> {
    if height < 32 || width < 32 {
        return Err(Error::Config(format!("synthetic images must be at least 32x32, got {width}x{height}")));
    }
    loop {
        let n_trees = rng.random_range(3..=8);
        let mut label = Field::filled(height, width, 0u8);
        let mut darkness = Field::filled(height, width, 0.0f64);
        for _ in 0..n_trees {
            let contrast = rng.random_range(0.15..=0.5);
            let mut strokes = Vec::new();
            grow_tree(rng, height, width, &mut strokes);
            let mut tree = Field::filled(height, width, 0u8);
            for s in &strokes {
                for (i, win) in s.points.windows(2).enumerate() {
                    rasterize_segment(&mut tree, win[0], win[1], s.widths[i + 1]);
                }
            }
            for (i, &v) in tree.data().iter().enumerate() {
                if v != 0 {
                    label.data_mut()[i] = 1;
                    let d = &mut darkness.data_mut()[i];
                    *d = d.max(contrast);
                }
            }
        }
        // Redraw degenerate layouts, e.g. trees that leave the frame at once.
        let frac = label.count_nonzero() as f64 / (height * width) as f64;
        if !(MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
            continue;
        }
        let base = rng.random_range(0.5..0.7);
        let waves: Vec<(f64, f64, f64, f64)> = (0..2)
            .map(|_| (rng.random_range(0.03..0.08), rng.random_range(0.3..1.5), rng.random_range(0.3..1.5), rng.random_range(0.0..TAU)))
            .collect();
        let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
        let image = Field::from_fn(height, width, |y, x| {
            let (fy, fx) = (y as f64 / height as f64, x as f64 / width as f64);
            let bg: f64 = base + waves.iter().map(|&(a, ky, kx, ph)| a * (TAU * (ky * fy + kx * fx) + ph).sin()).sum::<f64>();
            let v = bg - darkness.get(y, x) + noise.sample(rng);
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        });
        return Ok(SynthImage { image, label });
    }
}

/// Seed of image `index` in a dataset generated with `seed`.
fn image_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (index as u64).wrapping_mul(0xd1b5_4a32_d192_ed03)
}

/// Writes `count` image/label PGM pairs plus `manifest.txt` into `out_dir`.
pub fn synth_generate(count: usize, height: usize, width: usize, seed: u64, split: Split, out_dir: &Path) -> Result<DatasetManifest> {
    if count == 0 {
        return Err(Error::Config("count must be at least 1".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(image_seed(seed, i));
        let s = synth_image(height, width, &mut rng)?;
        let img = out_dir.join(format!("image_{i:04}.pgm"));
        let lbl = out_dir.join(format!("label_{i:04}.pgm"));
        write_pgm(&s.image, &img)?;
        write_pgm(&s.label.map(|v| v * 255), &lbl)?;
        entries.push(ManifestEntry { image: img, label: lbl, mask: None });
    }
    let manifest = DatasetManifest { entries, split };
    manifest.write(out_dir.join("manifest.txt"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let a = synth_image(64, 64, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = synth_image(64, 64, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let c = synth_image(64, 64, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn foreground_fraction_in_range() {
        let mut total = 0usize;
        for i in 0..100 {
            let s = synth_image(64, 64, &mut ChaCha8Rng::seed_from_u64(image_seed(1, i))).unwrap();
            let fg = s.label.count_nonzero();
            assert!(fg > 0 && fg < 64 * 64);
            let frac = fg as f64 / 4096.0;
            assert!((0.02..=0.25).contains(&frac), "image {i}: {frac}");
            total += fg;
        }
        let mean = total as f64 / (100.0 * 4096.0);
        assert!((0.02..=0.25).contains(&mean), "{mean}");
    }

    #[test]
    fn too_small_rejected() {
        assert!(synth_image(31, 64, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
