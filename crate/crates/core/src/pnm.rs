//! Binary portable pixmap (P6) and graymap (P5) files with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::ClassMask;
use crate::tensor::{Scalar, Tensor};

/// Interleaved 8-bit RGB image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{}x{} RGB image needs {} bytes, got {}",
                height,
                width,
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Shape(format!(
                "crop {}x{} at ({}, {}) exceeds {}x{}",
                h, w, y0, x0, self.height, self.width
            )));
        }
        Ok(Self::from_fn(h, w, |y, x| self.get(y0 + y, x0 + x)))
    }

    /// (1, 3, H, W) tensor with values in [0, 1].
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn([1, 3, self.height, self.width], |[_, c, y, x]| {
            self.data[(y * self.width + x) * 3 + c] as f64 / 255.0
        })
    }
}

fn is_space(b: u8) -> bool {
    matches!(b, b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c)
}

/// Parses `magic width height maxval` and returns the header fields and the
/// payload offset. Comments run from `#` to the end of the line.
fn parse_header(bytes: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Format(format!(
            "expected magic {}",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
        loop {
            match bytes.get(pos) {
                Some(&b) if is_space(b) => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format(format!("missing or malformed {name} in header")));
        }
        fields[i] = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("{name} out of range")))?;
    }
    match bytes.get(pos) {
        Some(&b) if is_space(b) => pos += 1,
        _ => return Err(Error::Format("header must end with one whitespace byte".into())),
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {maxval}; only 255 is accepted")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Format(format!("empty image {w}x{h}")));
    }
    Ok((w, h, pos))
}

fn payload<'a>(bytes: &'a [u8], offset: usize, expected: usize) -> Result<&'a [u8]> {
    let rest = &bytes[offset..];
    if rest.len() < expected {
        return Err(Error::Format(format!(
            "truncated payload: {} of {} bytes",
            rest.len(),
            expected
        )));
    }
    Ok(&rest[..expected])
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let (w, h, off) = parse_header(bytes, b"P6")?;
    RgbImage::new(h, w, payload(bytes, off, w * h * 3)?.to_vec())
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<ClassMask> {
    let (w, h, off) = parse_header(bytes, b"P5")?;
    ClassMask::new(h, w, payload(bytes, off, w * h)?.to_vec())
}

pub fn encode_pgm(mask: &ClassMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend_from_slice(mask.labels());
    out
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn read_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    with_path(path, decode_ppm(&fs::read(path)?))
}

pub fn write_image(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    Ok(fs::write(path, encode_ppm(img))?)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<ClassMask> {
    let path = path.as_ref();
    with_path(path, decode_pgm(&fs::read(path)?))
}

pub fn write_mask(path: impl AsRef<Path>, mask: &ClassMask) -> Result<()> {
    Ok(fs::write(path, encode_pgm(mask))?)
}
