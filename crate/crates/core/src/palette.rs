//! Class palettes: index, display colour and name per class.

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::mask::{ClassMask, IGNORE};
use crate::pnm::RgbImage;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaletteEntry {
    pub index: u8,
    pub rgb: [u8; 3],
    pub name: String,
}

/// Ordered classes with a one-to-one index/colour mapping.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Palette {
    entries: Vec<PaletteEntry>,
}

const LAND_COVER: [(&str, [u8; 3]); 8] = [
    ("urban", [0, 255, 255]),
    ("agriculture", [255, 255, 0]),
    ("rangeland", [255, 0, 255]),
    ("forest", [0, 255, 0]),
    ("water", [0, 0, 255]),
    ("barren", [255, 255, 255]),
    ("wetland", [128, 64, 0]),
    ("road", [128, 128, 128]),
];

impl Palette {
    pub fn new(entries: Vec<PaletteEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Data("palette has no classes".into()));
        }
        let mut colours = HashSet::new();
        for (i, e) in entries.iter().enumerate() {
            if e.index as usize != i {
                return Err(Error::Data(format!(
                    "palette entry {} has index {}; indices must run 0, 1, 2, ...",
                    i, e.index
                )));
            }
            if e.index == IGNORE {
                return Err(Error::Data("index 255 is reserved for ignore".into()));
            }
            if !colours.insert(e.rgb) {
                return Err(Error::Data(format!("colour {:?} is used twice", e.rgb)));
            }
        }
        Ok(Self { entries })
    }

    /// Land-cover names and colours for up to eight classes, generated
    /// distinct colours beyond that.
    pub fn default_for(classes: usize) -> Result<Self> {
        let entries = (0..classes)
            .map(|i| {
                let (name, rgb) = LAND_COVER.get(i).map(|&(n, c)| (n.to_string(), c)).unwrap_or_else(|| {
                    let v = (i as u32).wrapping_mul(2_654_435_761);
                    (format!("class{i}"), [(v >> 8) as u8, (v >> 16) as u8, (v >> 24) as u8 | 1])
                });
                PaletteEntry {
                    index: i as u8,
                    rgb,
                    name,
                }
            })
            .collect();
        Self::new(entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PaletteEntry] {
        &self.entries
    }

    pub fn colour(&self, index: u8) -> Option<[u8; 3]> {
        self.entries.get(index as usize).map(|e| e.rgb)
    }

    pub fn index_of(&self, rgb: [u8; 3]) -> Option<u8> {
        self.entries.iter().find(|e| e.rgb == rgb).map(|e| e.index)
    }

    /// Colour rendering of a mask; ignore pixels are black.
    pub fn colourize(&self, mask: &ClassMask) -> RgbImage {
        RgbImage::from_fn(mask.height(), mask.width(), |y, x| {
            self.colour(mask.get(y, x)).unwrap_or([0, 0, 0])
        })
    }

    /// One line per class: `index r g b name`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(s, "{} {} {} {} {}", e.index, e.rgb[0], e.rgb[1], e.rgb[2], e.name);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::Data(format!("palette line {}: expected 'index r g b name', got '{line}'", n + 1));
            let mut parts = line.split_whitespace();
            let mut num = || -> Result<u8> { parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad) };
            let index = num()?;
            let rgb = [num()?, num()?, num()?];
            let name = line.split_whitespace().skip(4).collect::<Vec<_>>().join(" ");
            if name.is_empty() {
                return Err(bad());
            }
            entries.push(PaletteEntry { index, rgb, name });
        }
        Self::new(entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_and_bijection() {
        let p = Palette::default_for(12).unwrap();
        assert_eq!(Palette::parse(&p.to_text()).unwrap(), p);
        for e in p.entries() {
            assert_eq!(p.index_of(e.rgb), Some(e.index));
        }
    }

    #[test]
    fn rejects_duplicates_and_gaps() {
        assert!(Palette::parse("0 1 2 3 a\n1 1 2 3 b\n").is_err());
        assert!(Palette::parse("0 1 2 3 a\n2 4 5 6 b\n").is_err());
        let err = Palette::parse("0 1 2 a\n").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn colourize_marks_ignore_black() {
        let p = Palette::default_for(2).unwrap();
        let m = ClassMask::from_fn(1, 3, |_, x| [0, 1, IGNORE][x]);
        let img = p.colourize(&m);
        assert_eq!(img.get(0, 0), p.colour(0).unwrap());
        assert_eq!(img.get(0, 2), [0, 0, 0]);
    }
}
