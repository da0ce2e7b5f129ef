//! Confusion matrix, mean IoU and mean F1.

use crate::error::{Error, Result};
use crate::mask::{ClassMask, IGNORE};

/// `counts[t * k + p]` = pixels of true class `t` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

/// Per-class scores (`None` where undefined) and their mean over defined classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::Shape(format!(
                "{} counts for {} classes",
                counts.len(),
                classes
            )));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one prediction/ground-truth pair; ignore pixels in `gt` are skipped.
    pub fn accumulate(&mut self, pred: &ClassMask, gt: &ClassMask) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        gt.validate(self.classes)?;
        if let Some(&bad) = pred
            .labels()
            .iter()
            .find(|&&p| p == IGNORE || p as usize >= self.classes)
        {
            return Err(Error::Data(format!(
                "prediction label {} is out of range for {} classes",
                bad, self.classes
            )));
        }
        for (&p, &t) in pred.labels().iter().zip(gt.labels()) {
            if t != IGNORE {
                self.counts[t as usize * self.classes + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// `(TP, FP, FN)` of class `c`.
    pub fn tp_fp_fn(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.get(c, c);
        let col: u64 = (0..self.classes).map(|t| self.get(t, c)).sum();
        let row: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
        (tp, col - tp, row - tp)
    }

    /// `TP / (TP + FP + FN)` per class.
    pub fn miou(&self) -> ClassScores {
        let per_class = (0..self.classes)
            .map(|c| {
                let (tp, fp, fnn) = self.tp_fp_fn(c);
                let den = tp + fp + fnn;
                (den > 0).then(|| tp as f64 / den as f64)
            })
            .collect();
        scores(per_class)
    }

    /// Harmonic mean of precision and recall per class.
    pub fn mf1(&self) -> ClassScores {
        let per_class = (0..self.classes)
            .map(|c| {
                let (tp, fp, fnn) = self.tp_fp_fn(c);
                if tp + fp + fnn == 0 {
                    return None;
                }
                if tp == 0 {
                    return Some(0.0);
                }
                let p = tp as f64 / (tp + fp) as f64;
                let r = tp as f64 / (tp + fnn) as f64;
                Some(2.0 * p * r / (p + r))
            })
            .collect();
        scores(per_class)
    }
}

fn scores(per_class: Vec<Option<f64>>) -> ClassScores {
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    ClassScores { per_class, mean }
}
