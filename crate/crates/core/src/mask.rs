use crate::error::{Error, Result};

/// Label excluded from losses and metrics.
pub const IGNORE: u8 = 255;

/// 2-D map of class indices, row-major. [`IGNORE`] marks unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ClassMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl ClassMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {}x{} needs {} labels, got {}",
                height,
                width,
                height * width,
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut labels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                labels.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            labels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.labels[y * self.width + x] = v;
    }

    /// Checks every non-ignore label is below `classes`.
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self
            .labels
            .iter()
            .position(|&l| l != IGNORE && l as usize >= classes)
        {
            Some(i) => Err(Error::Data(format!(
                "label {} at ({}, {}) is out of range for {} classes",
                self.labels[i],
                i / self.width,
                i % self.width,
                classes
            ))),
            None => Ok(()),
        }
    }

    pub fn valid_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE).count()
    }

    /// Sorted distinct labels present, including [`IGNORE`] if any.
    pub fn label_set(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (0..=255u8).filter(|&l| seen[l as usize]).collect()
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::Shape(format!(
                "crop {}x{} at ({}, {}) exceeds mask {}x{}",
                h, w, y0, x0, self.height, self.width
            )));
        }
        Ok(Self::from_fn(h, w, |y, x| self.get(y0 + y, x0 + x)))
    }
}
