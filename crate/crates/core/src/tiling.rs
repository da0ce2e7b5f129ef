//! Inference on images of arbitrary size.
//!
//! [`infer_whole`] reflect-pads to the encoder's size grid and runs the
//! network once. [`tiled_logits`] runs overlapping square tiles instead and
//! averages logits where tiles overlap. Tiles may be evaluated in parallel;
//! fusion always accumulates them in row-major tile order so the result does
//! not depend on scheduling.

use rayon::prelude::*;

use crate::backbone::{MIN_INPUT, OUTPUT_STRIDE};
use crate::error::{config_err, shape_err, Result};
use crate::mask::ClassMask;
use crate::model::{argmax, Model};
use crate::tensor::{Scalar, Tensor};

/// Mirror index for reflect padding (edge pixel not repeated).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Pads (B, C, H, W) to `(h, w)` by reflection at the bottom and right.
pub fn reflect_pad<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let [b, c, xh, xw] = x.dims();
    if h < xh || w < xw {
        return shape_err(format!("cannot pad {xh}x{xw} down to {h}x{w}"));
    }
    Ok(Tensor::from_fn([b, c, h, w], |[n, ch, y, xx]| {
        x.at(n, ch, reflect(y as isize, xh), reflect(xx as isize, xw))
    }))
}

/// Smallest valid network input extent covering `n` pixels.
pub fn padded_extent(n: usize) -> usize {
    n.div_ceil(OUTPUT_STRIDE).max(MIN_INPUT / OUTPUT_STRIDE) * OUTPUT_STRIDE
}

/// Whole-image logits for any image size.
pub fn infer_whole<T: Scalar>(model: &Model<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, _, h, w] = image.dims();
    let (ph, pw) = (padded_extent(h), padded_extent(w));
    if (ph, pw) == (h, w) {
        return model.infer_logits(image);
    }
    model.infer_logits(&reflect_pad(image, ph, pw)?)?.crop(0, 0, h, w)
}

/// Tile origins along one axis of extent `n >= tile`; the last tile is
/// flush with the far edge.
fn origins(n: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..).map(|i| i * stride).take_while(|&o| o + tile < n).collect();
    out.push(n - tile);
    out
}

fn check_tiling(tile: usize, overlap: usize) -> Result<()> {
    if tile % OUTPUT_STRIDE != 0 || tile < MIN_INPUT {
        return config_err(format!("tile {tile} must be a multiple of 32 and at least {MIN_INPUT}"));
    }
    if overlap % 2 != 0 {
        return config_err(format!("overlap {overlap} must be even"));
    }
    if overlap >= tile {
        return config_err(format!("overlap {overlap} must be smaller than tile {tile}"));
    }
    Ok(())
}

/// Overlap-averaged logits of one (1, 3, H, W) image.
pub fn tiled_logits<T: Scalar>(model: &Model<T>, image: &Tensor<T>, tile: usize, overlap: usize) -> Result<Tensor<T>> {
    check_tiling(tile, overlap)?;
    let [b, _, h, w] = image.dims();
    if b != 1 {
        return shape_err(format!("tiled inference takes one image, got a batch of {b}"));
    }
    if h <= tile && w <= tile {
        return infer_whole(model, image);
    }
    let (ph, pw) = (h.max(tile), w.max(tile));
    let padded = if (ph, pw) == (h, w) {
        image.clone()
    } else {
        reflect_pad(image, ph, pw)?
    };
    let stride = tile - overlap;
    let tiles: Vec<(usize, usize)> = origins(ph, tile, stride)
        .into_iter()
        .flat_map(|y| origins(pw, tile, stride).into_iter().map(move |x| (y, x)))
        .collect();
    let logits = tiles
        .par_iter()
        .map(|&(y, x)| model.infer_logits(&padded.crop(y, x, tile, tile)?))
        .collect::<Result<Vec<_>>>()?;

    let k = model.config().classes;
    let mut sum = vec![0.0f64; k * ph * pw];
    let mut count = vec![0u32; ph * pw];
    for (&(y0, x0), t) in tiles.iter().zip(&logits) {
        for y in 0..tile {
            for x in 0..tile {
                let p = (y0 + y) * pw + x0 + x;
                count[p] += 1;
                for c in 0..k {
                    sum[c * ph * pw + p] += t.at(0, c, y, x);
                }
            }
        }
    }
    Tensor::from_fn([1, k, ph, pw], |[_, c, y, x]| {
        let p = y * pw + x;
        sum[c * ph * pw + p] / count[p] as f64
    })
    .crop(0, 0, h, w)
}

pub fn tiled_infer<T: Scalar>(model: &Model<T>, image: &Tensor<T>, tile: usize, overlap: usize) -> Result<ClassMask> {
    Ok(argmax(&tiled_logits(model, image, tile, overlap)?).remove(0))
}
