//! Dataset directories: `images/*.ppm`, `masks/*.pgm` with matching stems,
//! and `palette.txt`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::mask::ClassMask;
use crate::palette::Palette;
use crate::pnm::{read_image, read_mask, write_image, write_mask, RgbImage};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub name: String,
    pub image: RgbImage,
    pub mask: ClassMask,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub palette: Palette,
    pub samples: Vec<Sample>,
}

/// Files in `dir` with extension `ext`, sorted by name.
pub fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e == ext) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

impl Dataset {
    pub fn classes(&self) -> usize {
        self.palette.len()
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let palette = Palette::parse(&fs::read_to_string(dir.join("palette.txt"))?)?;
        let images = list_files(&dir.join("images"), "ppm")?;
        if images.is_empty() {
            return Err(Error::Data(format!("{}: no images/*.ppm files", dir.display())));
        }
        let mut samples = Vec::with_capacity(images.len());
        for path in images {
            let name = stem(&path);
            let mask_path = dir.join("masks").join(format!("{name}.pgm"));
            if !mask_path.exists() {
                return Err(Error::Data(format!("image {name} has no mask at {}", mask_path.display())));
            }
            let image = read_image(&path)?;
            let mask = read_mask(&mask_path)?;
            if (image.height(), image.width()) != (mask.height(), mask.width()) {
                return Err(Error::Data(format!(
                    "{name}: image is {}x{} but mask is {}x{}",
                    image.height(),
                    image.width(),
                    mask.height(),
                    mask.width()
                )));
            }
            mask.validate(palette.len())
                .map_err(|e| Error::Data(format!("{name}: {e}")))?;
            samples.push(Sample { name, image, mask });
        }
        Ok(Self { palette, samples })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("images"))?;
        fs::create_dir_all(dir.join("masks"))?;
        fs::write(dir.join("palette.txt"), self.palette.to_text())?;
        for s in &self.samples {
            write_image(dir.join("images").join(format!("{}.ppm", s.name)), &s.image)?;
            write_mask(dir.join("masks").join(format!("{}.pgm", s.name)), &s.mask)?;
        }
        Ok(())
    }
}
