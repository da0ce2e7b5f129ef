//! Sobel boundary targets.
//!
//! Class boundaries are found by running both Sobel kernels over the raw
//! class-index map (replicate border), thresholding `|Gx| + |Gy| > 0`, and
//! dilating the result `d` times with a 3x3 square. Pixels inside the
//! dilated band keep their label; all others become [`IGNORE`].

use crate::error::{Error, Result};
use crate::mask::{ClassMask, IGNORE};

pub const SOBEL_X: [[i32; 3]; 3] = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]];
pub const SOBEL_Y: [[i32; 3]; 3] = [[-1, -2, -1], [0, 0, 0], [1, 2, 1]];

/// Pixels where the Sobel response of the label map is nonzero.
pub fn sobel_edges(y: &ClassMask) -> Vec<bool> {
    let (h, w) = (y.height() as isize, y.width() as isize);
    let at = |r: isize, c: isize| y.get(r.clamp(0, h - 1) as usize, c.clamp(0, w - 1) as usize) as i32;
    let mut out = Vec::with_capacity((h * w) as usize);
    for r in 0..h {
        for c in 0..w {
            let (mut gx, mut gy) = (0, 0);
            for (i, dy) in (-1..=1).enumerate() {
                for (j, dx) in (-1..=1).enumerate() {
                    let v = at(r + dy, c + dx);
                    gx += SOBEL_X[i][j] * v;
                    gy += SOBEL_Y[i][j] * v;
                }
            }
            out.push(gx.abs() + gy.abs() > 0);
        }
    }
    out
}

/// `d` iterations of 3x3 binary dilation, done as a separable box maximum
/// of radius `d` along rows then columns.
pub fn dilate(bits: &[bool], height: usize, width: usize, d: usize) -> Vec<bool> {
    let mut rows = vec![false; bits.len()];
    for r in 0..height {
        let row = &bits[r * width..(r + 1) * width];
        // Distance to nearest set pixel scanning both directions.
        let mut last: Option<usize> = None;
        for c in 0..width {
            if row[c] {
                last = Some(c);
            }
            if matches!(last, Some(l) if c - l <= d) {
                rows[r * width + c] = true;
            }
        }
        let mut next: Option<usize> = None;
        for c in (0..width).rev() {
            if row[c] {
                next = Some(c);
            }
            if matches!(next, Some(n) if n - c <= d) {
                rows[r * width + c] = true;
            }
        }
    }
    let mut out = vec![false; bits.len()];
    for c in 0..width {
        let mut last: Option<usize> = None;
        for r in 0..height {
            if rows[r * width + c] {
                last = Some(r);
            }
            if matches!(last, Some(l) if r - l <= d) {
                out[r * width + c] = true;
            }
        }
        let mut next: Option<usize> = None;
        for r in (0..height).rev() {
            if rows[r * width + c] {
                next = Some(r);
            }
            if matches!(next, Some(n) if n - r <= d) {
                out[r * width + c] = true;
            }
        }
    }
    out
}

/// Ground truth restricted to pixels within Chebyshev distance `d` of a
/// Sobel-positive pixel; everything else is [`IGNORE`].
pub fn sobel_boundary_target(y: &ClassMask, d: usize) -> Result<ClassMask> {
    if d < 1 {
        return Err(Error::Config("boundary dilation d must be >= 1".into()));
    }
    let band = dilate(&sobel_edges(y), y.height(), y.width(), d);
    let labels = y
        .labels()
        .iter()
        .zip(&band)
        .map(|(&l, &keep)| if keep { l } else { IGNORE })
        .collect();
    ClassMask::new(y.height(), y.width(), labels)
}
