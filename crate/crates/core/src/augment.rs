//! Joint image/mask augmentation: flips, quarter-turn rotations, rescaling,
//! cropping and colour jitter.
//!
//! Geometric steps move the mask with the image; the mask is resampled by
//! nearest neighbour so no new labels appear. Colour jitter touches the
//! image only.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::mask::ClassMask;
use crate::pnm::RgbImage;

pub const SCALES: [f64; 7] = [0.7, 0.8, 0.9, 1.0, 1.25, 1.5, 1.75];
pub const JITTER: (f64, f64) = (0.8, 1.2);

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPolicy {
    pub flip: bool,
    pub rotate: bool,
    /// Candidate scale factors; empty disables rescaling.
    pub scales: Vec<f64>,
    /// Square random crop side.
    pub crop: Option<usize>,
    pub jitter: bool,
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        Self {
            flip: false,
            rotate: false,
            scales: Vec::new(),
            crop: None,
            jitter: false,
        }
    }

    pub fn full(crop: Option<usize>) -> Self {
        Self {
            flip: true,
            rotate: true,
            scales: SCALES.to_vec(),
            crop,
            jitter: true,
        }
    }
}

pub fn hflip(img: &RgbImage, mask: &ClassMask) -> (RgbImage, ClassMask) {
    let w = img.width();
    (
        RgbImage::from_fn(img.height(), w, |y, x| img.get(y, w - 1 - x)),
        ClassMask::from_fn(mask.height(), w, |y, x| mask.get(y, w - 1 - x)),
    )
}

pub fn vflip(img: &RgbImage, mask: &ClassMask) -> (RgbImage, ClassMask) {
    let h = img.height();
    (
        RgbImage::from_fn(h, img.width(), |y, x| img.get(h - 1 - y, x)),
        ClassMask::from_fn(h, mask.width(), |y, x| mask.get(h - 1 - y, x)),
    )
}

/// Counter-clockwise rotation by `quarters * 90` degrees.
pub fn rot90(img: &RgbImage, mask: &ClassMask, quarters: usize) -> (RgbImage, ClassMask) {
    let (mut i, mut m) = (img.clone(), mask.clone());
    for _ in 0..quarters % 4 {
        let (h, w) = (i.height(), i.width());
        i = RgbImage::from_fn(w, h, |y, x| i.get(x, w - 1 - y));
        m = ClassMask::from_fn(w, h, |y, x| m.get(x, w - 1 - y));
    }
    (i, m)
}

/// Rescales to `round(h * s) x round(w * s)`: bilinear for the image,
/// nearest neighbour for the mask, half-pixel centres for both.
pub fn rescale(img: &RgbImage, mask: &ClassMask, s: f64) -> Result<(RgbImage, ClassMask)> {
    let (h, w) = (img.height(), img.width());
    let (oh, ow) = ((h as f64 * s).round() as usize, (w as f64 * s).round() as usize);
    if oh == 0 || ow == 0 {
        return Err(Error::Config(format!("scale {s} collapses a {h}x{w} image")));
    }
    let src = |o: usize, n: usize, on: usize| ((o as f64 + 0.5) * n as f64 / on as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let image = RgbImage::from_fn(oh, ow, |y, x| {
        let (sy, sx) = (src(y, h, oh), src(x, w, ow));
        let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
        let mut out = [0u8; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let v = |yy: usize, xx: usize| img.get(yy, xx)[c] as f64;
            let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
            let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
            *o = (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8;
        }
        out
    });
    let nearest = |o: usize, n: usize, on: usize| (((o as f64 + 0.5) * n as f64 / on as f64) as usize).min(n - 1);
    let mask = ClassMask::from_fn(oh, ow, |y, x| mask.get(nearest(y, h, oh), nearest(x, w, ow)));
    Ok((image, mask))
}

/// Brightness, contrast and saturation factors applied in that order.
pub fn colour_jitter(img: &RgbImage, brightness: f64, contrast: f64, saturation: f64) -> RgbImage {
    let n = (img.height() * img.width()) as f64;
    let grey = |p: [f64; 3]| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
    let px: Vec<[f64; 3]> = img
        .data()
        .chunks(3)
        .map(|c| [c[0] as f64 * brightness, c[1] as f64 * brightness, c[2] as f64 * brightness])
        .collect();
    let mean = px.iter().map(|&p| grey(p)).sum::<f64>() / n;
    let mut i = 0;
    RgbImage::from_fn(img.height(), img.width(), |_, _| {
        let p = px[i];
        i += 1;
        let c = p.map(|v| mean + (v - mean) * contrast);
        let g = grey(c);
        c.map(|v| (g + (v - g) * saturation).round().clamp(0.0, 255.0) as u8)
    })
}

pub fn augment(
    img: &RgbImage,
    mask: &ClassMask,
    rng: &mut impl Rng,
    policy: &AugmentPolicy,
) -> Result<(RgbImage, ClassMask)> {
    if (img.height(), img.width()) != (mask.height(), mask.width()) {
        return Err(Error::Shape("image and mask sizes differ".into()));
    }
    let (mut i, mut m) = (img.clone(), mask.clone());
    if policy.flip {
        if rng.gen_bool(0.5) {
            (i, m) = hflip(&i, &m);
        }
        if rng.gen_bool(0.5) {
            (i, m) = vflip(&i, &m);
        }
    }
    if policy.rotate {
        (i, m) = rot90(&i, &m, rng.gen_range(0..4));
    }
    if let Some(&s) = policy.scales.choose(rng) {
        if s != 1.0 {
            (i, m) = rescale(&i, &m, s)?;
        }
    }
    if let Some(c) = policy.crop {
        if c > i.height() || c > i.width() {
            return Err(Error::Config(format!(
                "crop {c} is larger than the {}x{} scaled image",
                i.height(),
                i.width()
            )));
        }
        let y0 = rng.gen_range(0..=i.height() - c);
        let x0 = rng.gen_range(0..=i.width() - c);
        i = i.crop(y0, x0, c, c)?;
        m = m.crop(y0, x0, c, c)?;
    }
    if policy.jitter {
        let mut f = || rng.gen_range(JITTER.0..=JITTER.1);
        let (b, c, s) = (f(), f(), f());
        i = colour_jitter(&i, b, c, s);
    }
    Ok((i, m))
}

/// Scales whose result still fits a crop of side `crop`.
pub fn feasible_scales(scales: &[f64], height: usize, width: usize, crop: usize) -> Vec<f64> {
    scales
        .iter()
        .copied()
        .filter(|&s| {
            let side = (height.min(width) as f64 * s).round() as usize;
            side >= crop
        })
        .collect()
}
