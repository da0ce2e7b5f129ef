//! Five-stage encoder: two plain stride-2 stages, then three stages of a
//! stride-2 conv followed by `r` MKA modules.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::graph::{Graph, Var};
use crate::mka::{MkaConfig, MkaModule};
use crate::nn::ConvBnRelu;
use crate::param::ParamStore;
use crate::tensor::Scalar;

/// Smallest accepted input side.
pub const MIN_INPUT: usize = 64;
/// Total downsampling of the encoder.
pub const OUTPUT_STRIDE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderMode {
    /// Two coordinate attention modules.
    Cam,
    /// Plain concatenation and pointwise fusion.
    Concat,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub variant: String,
    /// Backbone width `c`.
    pub width: usize,
    /// MKA repeats per stage `r`.
    pub repeats: usize,
    /// MKA branches `M`.
    pub branches: usize,
    /// Number of classes `K`.
    pub classes: usize,
    pub decoder: DecoderMode,
}

impl NetConfig {
    fn preset(name: &str, width: usize, classes: usize) -> Self {
        Self {
            variant: name.to_string(),
            width,
            repeats: 1,
            branches: 3,
            classes,
            decoder: DecoderMode::Cam,
        }
    }

    pub fn small(classes: usize) -> Self {
        Self::preset("small", 64, classes)
    }

    pub fn base(classes: usize) -> Self {
        Self::preset("base", 96, classes)
    }

    pub fn large(classes: usize) -> Self {
        Self::preset("large", 128, classes)
    }

    pub fn from_variant(name: &str, classes: usize) -> Result<Self> {
        match name {
            "small" => Ok(Self::small(classes)),
            "base" => Ok(Self::base(classes)),
            "large" => Ok(Self::large(classes)),
            other => config_err(format!(
                "unknown variant '{other}' (expected small, base or large)"
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 2 || self.width % 2 != 0 {
            return config_err(format!("width c must be even and >= 2, got {}", self.width));
        }
        if self.repeats < 1 {
            return config_err("repeats r must be >= 1");
        }
        if self.branches < 1 {
            return config_err("branches M must be >= 1");
        }
        if self.classes < 2 || self.classes > 255 {
            return config_err(format!("classes K must be in 2..=255, got {}", self.classes));
        }
        Ok(())
    }

    /// Output channels of stages 1 to 5.
    pub fn stage_channels(&self) -> [usize; 5] {
        let c = self.width;
        [c / 2, c, 2 * c, 4 * c, 8 * c]
    }
}

/// Checks an input extent against the encoder's size rules.
pub fn check_input_size(h: usize, w: usize) -> Result<()> {
    if h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
        return shape_err(format!(
            "input {h}x{w}: height and width must be divisible by 32 (encoder downsamples 5 times)"
        ));
    }
    if h < MIN_INPUT || w < MIN_INPUT {
        return shape_err(format!("input {h}x{w}: minimum size is {MIN_INPUT}x{MIN_INPUT}"));
    }
    Ok(())
}

/// Feature maps of stages 3, 4 and 5.
#[derive(Clone, Copy, Debug)]
pub struct StageOutputs {
    pub s3: Var,
    pub s4: Var,
    pub s5: Var,
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub down: ConvBnRelu,
    pub mkas: Vec<MkaModule>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub stages: Vec<Stage>,
}

impl Encoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, cfg: &NetConfig) -> Self {
        let channels = cfg.stage_channels();
        let mut cin = 3;
        let stages = channels
            .iter()
            .enumerate()
            .map(|(i, &cout)| {
                let s = i + 1;
                let down = ConvBnRelu::new(store, rng, &format!("stage{s}"), cin, cout, 3, 2);
                let mkas = if s >= 3 {
                    (1..=cfg.repeats)
                        .map(|j| {
                            MkaModule::new(
                                store,
                                rng,
                                &format!("stage{s}.mka{j}"),
                                MkaConfig::new(cout, cfg.branches),
                            )
                        })
                        .collect()
                } else {
                    Vec::new()
                };
                cin = cout;
                Stage { down, mkas }
            })
            .collect();
        Self { stages }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<StageOutputs> {
        let d = g.dims(image);
        if d[1] != 3 {
            return shape_err(format!("encoder expects 3 input channels, got {}", d[1]));
        }
        check_input_size(d[2], d[3])?;
        let mut x = image;
        let mut outs = Vec::with_capacity(3);
        for (i, stage) in self.stages.iter().enumerate() {
            x = stage.down.forward(g, x)?;
            for m in &stage.mkas {
                x = m.forward(g, x)?;
            }
            if i >= 2 {
                outs.push(x);
            }
        }
        Ok(StageOutputs {
            s3: outs[0],
            s4: outs[1],
            s5: outs[2],
        })
    }

    pub fn mka_count(&self) -> usize {
        self.stages.iter().map(|s| s.mkas.len()).sum()
    }
}
