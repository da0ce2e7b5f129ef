//! Segmentation heads and the training losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::boundary::sobel_boundary_target;
use crate::conv::ConvSpec;
use crate::error::{config_err, Result};
use crate::graph::{Graph, Var};
use crate::mask::ClassMask;
use crate::nn::{Conv, ConvBnRelu};
use crate::param::ParamStore;
use crate::tensor::Scalar;

/// 3x3 conv + BN + ReLU halving the channels, a biased pointwise classifier,
/// then bilinear upsampling to input resolution.
#[derive(Clone, Debug)]
pub struct SegHead {
    pub body: ConvBnRelu,
    pub classifier: Conv,
    pub up_factor: usize,
}

impl SegHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        prefix: &str,
        channels: usize,
        classes: usize,
        up_factor: usize,
    ) -> Self {
        let mid = (channels / 2).max(1);
        Self {
            body: ConvBnRelu::new(store, rng, prefix, channels, mid, 3, 1),
            classifier: Conv::new(
                store,
                rng,
                &format!("{prefix}.cls"),
                mid,
                classes,
                1,
                ConvSpec::pointwise(),
                true,
            ),
            up_factor,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, features: Var) -> Result<Var> {
        let x = self.body.forward(g, features)?;
        let logits = self.classifier.forward(g, x)?;
        g.upsample_bilinear(logits, self.up_factor)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub main: f64,
    pub aux: f64,
    pub boundary: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            main: 1.0,
            aux: 1.0,
            boundary: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w1", self.main), ("w2", self.aux), ("w3", self.boundary)] {
            if !(w >= 0.0 && w.is_finite()) {
                return config_err(format!("loss weight {name} must be a non-negative number, got {w}"));
            }
        }
        Ok(())
    }
}

/// Cross-entropy restricted to the non-ignore pixels of a boundary target.
pub fn boundary_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    logits: Var,
    boundary_targets: &[ClassMask],
) -> Result<Var> {
    g.cross_entropy(logits, boundary_targets)
}

/// Which heads the boundary loss applies to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossOptions {
    /// Also apply the boundary loss to the main head.
    pub boundary_on_main: bool,
}

/// Graph nodes of the total loss and its three components.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub main: Var,
    /// Mean auxiliary cross-entropy, absent without auxiliary heads.
    pub aux: Option<Var>,
    /// Mean boundary loss, absent when no head receives it.
    pub boundary: Option<Var>,
}

/// `w1 * L_m + w2 * L_a + w3 * L_b`, with `L_a` and `L_b` averaged over heads.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    main: Var,
    aux: Option<&[Var]>,
    targets: &[ClassMask],
    boundary_targets: &[ClassMask],
    weights: LossWeights,
    opts: LossOptions,
) -> Result<LossTerms> {
    let l_main = g.cross_entropy(main, targets)?;
    let mut terms = vec![(l_main, weights.main)];

    let l_aux = match aux {
        Some(heads) if !heads.is_empty() => {
            let parts = heads
                .iter()
                .map(|&h| g.cross_entropy(h, targets))
                .collect::<Result<Vec<_>>>()?;
            let n = parts.len() as f64;
            let mean = g.weighted_sum(&parts.iter().map(|&p| (p, 1.0 / n)).collect::<Vec<_>>())?;
            terms.push((mean, weights.aux));
            Some(mean)
        }
        _ => None,
    };

    let mut boundary_heads: Vec<Var> = Vec::new();
    if opts.boundary_on_main {
        boundary_heads.push(main);
    }
    if let Some(heads) = aux {
        boundary_heads.extend_from_slice(heads);
    }
    let l_boundary = if boundary_heads.is_empty() {
        None
    } else {
        let parts = boundary_heads
            .iter()
            .map(|&h| boundary_loss(g, h, boundary_targets))
            .collect::<Result<Vec<_>>>()?;
        let n = parts.len() as f64;
        let mean = g.weighted_sum(&parts.iter().map(|&p| (p, 1.0 / n)).collect::<Vec<_>>())?;
        terms.push((mean, weights.boundary));
        Some(mean)
    };

    let total = g.weighted_sum(&terms)?;
    Ok(LossTerms {
        total,
        main: l_main,
        aux: l_aux,
        boundary: l_boundary,
    })
}

/// Boundary targets for a batch of masks.
pub fn boundary_targets(masks: &[ClassMask], d: usize) -> Result<Vec<ClassMask>> {
    masks.iter().map(|m| sobel_boundary_target(m, d)).collect()
}
