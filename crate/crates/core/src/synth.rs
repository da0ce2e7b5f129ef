//! Synthetic land-cover scenes for desk-scale training.
//!
//! Each scene layers a two-region background split, a straight band, a few
//! elliptical blobs and one meandering thin "river". Every class has its own
//! base colour and sinusoidal texture, plus per-pixel noise, so a pixel's
//! class is recoverable from a small neighbourhood.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::OUTPUT_STRIDE;
use crate::boundary::{dilate, sobel_edges};
use crate::dataset::{Dataset, Sample};
use crate::error::{config_err, Result};
use crate::mask::ClassMask;
use crate::palette::Palette;
use crate::pnm::RgbImage;

/// Boundary dilation the thin structures are sized against.
pub const DEFAULT_D: usize = 8;
/// River widths are drawn from this range, always below `2 * DEFAULT_D`.
pub const RIVER_WIDTH: (f64, f64) = (4.0, 10.0);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthSet {
    pub dataset: Dataset,
    /// Per sample, row-major: pixel lies on a thin structure.
    pub thin: Vec<Vec<bool>>,
}

struct Layers {
    labels: Vec<u8>,
    thin: Vec<bool>,
}

fn paint(size: usize, classes: &[u8], rng: &mut impl Rng) -> Layers {
    let s = size as f64;
    let mut labels = vec![0u8; size * size];
    let mut thin = vec![false; size * size];

    // Background: a random line through the image splits two classes.
    let (cx, cy) = (rng.gen_range(0.3..0.7) * s, rng.gen_range(0.3..0.7) * s);
    let theta = rng.gen_range(0.0..PI);
    let (nx, ny) = (theta.cos(), theta.sin());
    // Band: a straight stripe at another angle.
    let phi = rng.gen_range(0.0..PI);
    let (bx, by) = (phi.cos(), phi.sin());
    let band_offset = rng.gen_range(-0.25..0.25) * s;
    let band_half = rng.gen_range(s / 16.0..s / 8.0);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let side = (fx - cx) * nx + (fy - cy) * ny;
            let mut l = if side < 0.0 { classes[0] } else { classes[1] };
            let along = (fx - s / 2.0) * bx + (fy - s / 2.0) * by;
            if (along - band_offset).abs() < band_half {
                l = classes[2];
            }
            labels[y * size + x] = l;
        }
    }

    // Blobs.
    for b in 0..rng.gen_range(2..=3) {
        let (ex, ey) = (rng.gen_range(0.15..0.85) * s, rng.gen_range(0.15..0.85) * s);
        let (rx, ry) = (rng.gen_range(s / 10.0..s / 5.0), rng.gen_range(s / 10.0..s / 5.0));
        let class = classes[(3 + b) % classes.len()];
        for y in 0..size {
            for x in 0..size {
                let dx = (x as f64 + 0.5 - ex) / rx;
                let dy = (y as f64 + 0.5 - ey) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    labels[y * size + x] = class;
                }
            }
        }
    }

    // River: a sinusoid across the image, horizontal or vertical.
    let width = rng.gen_range(RIVER_WIDTH.0..RIVER_WIDTH.1);
    let base = rng.gen_range(0.25..0.75) * s;
    let amp = rng.gen_range(0.05..0.15) * s;
    let wavelength = rng.gen_range(0.5..1.2) * s;
    let phase = rng.gen_range(0.0..2.0 * PI);
    let vertical = rng.gen_bool(0.5);
    let class = classes[classes.len() - 1];
    for y in 0..size {
        for x in 0..size {
            let (along, across) = if vertical { (y, x) } else { (x, y) };
            let centre = base + amp * (2.0 * PI * (along as f64 + 0.5) / wavelength + phase).sin();
            if ((across as f64 + 0.5) - centre).abs() < width / 2.0 {
                labels[y * size + x] = class;
                thin[y * size + x] = true;
            }
        }
    }
    Layers { labels, thin }
}

fn render(size: usize, labels: &[u8], palette: &Palette, textures: &[(f64, f64, f64)], rng: &mut impl Rng) -> RgbImage {
    RgbImage::from_fn(size, size, |y, x| {
        let l = labels[y * size + x];
        let base = palette.colour(l).expect("label in palette");
        let (fx, fy, ph) = textures[l as usize];
        let tex = 14.0 * (fx * x as f64 + fy * y as f64 + ph).sin();
        base.map(|c| {
            let v = 40.0 + 0.7 * c as f64 + tex + rng.gen_range(-12.0..12.0);
            v.round().clamp(0.0, 255.0) as u8
        })
    })
}

/// `n` scenes of `size x size` pixels over `classes` classes.
pub fn synth_dataset(n: usize, size: usize, classes: usize, seed: u64) -> Result<SynthSet> {
    if size == 0 || size % OUTPUT_STRIDE != 0 {
        return config_err(format!("synthetic image size {size} must be a positive multiple of 32"));
    }
    if !(2..=255).contains(&classes) {
        return config_err(format!("classes K must be in 2..=255, got {classes}"));
    }
    let palette = Palette::default_for(classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let textures: Vec<(f64, f64, f64)> = (0..classes)
        .map(|_| (rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.0..2.0 * PI)))
        .collect();
    let all: Vec<u8> = (0..classes as u8).collect();
    let mut samples = Vec::with_capacity(n);
    let mut thin = Vec::with_capacity(n);
    for i in 0..n {
        // Rotate the class roles so that every class takes every role over the set.
        let mut order = all.clone();
        order.shuffle(&mut rng);
        order.rotate_left(i % classes);
        let roles: Vec<u8> = (0..6).map(|r| order[r % classes]).collect();
        let layers = paint(size, &roles, &mut rng);
        let image = render(size, &layers.labels, &palette, &textures, &mut rng);
        samples.push(Sample {
            name: format!("{i:04}"),
            image,
            mask: ClassMask::new(size, size, layers.labels)?,
        });
        thin.push(layers.thin);
    }
    Ok(SynthSet {
        dataset: Dataset { palette, samples },
        thin,
    })
}

impl SynthSet {
    /// Fraction of Sobel boundary pixels lying on or touching a thin
    /// structure, over the whole set.
    pub fn thin_boundary_fraction(&self) -> f64 {
        let (mut edges, mut on_thin) = (0usize, 0usize);
        for (s, t) in self.dataset.samples.iter().zip(&self.thin) {
            let near = dilate(t, s.mask.height(), s.mask.width(), 1);
            for (e, n) in sobel_edges(&s.mask).into_iter().zip(near) {
                edges += e as usize;
                on_thin += (e && n) as usize;
            }
        }
        if edges == 0 {
            0.0
        } else {
            on_thin as f64 / edges as f64
        }
    }

    /// Pixel share of each class over the set.
    pub fn class_fractions(&self) -> Vec<f64> {
        let k = self.dataset.classes();
        let mut counts = vec![0usize; k];
        let mut total = 0;
        for s in &self.dataset.samples {
            for &l in s.mask.labels() {
                counts[l as usize] += 1;
                total += 1;
            }
        }
        counts.into_iter().map(|c| c as f64 / total as f64).collect()
    }
}
