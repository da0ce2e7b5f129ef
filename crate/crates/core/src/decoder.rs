//! Coordinate attention and the multi-stage fusion decoder.

use rand::Rng;

use crate::backbone::{DecoderMode, NetConfig, StageOutputs};
use crate::error::{shape_err, Result};
use crate::graph::{BnParams, Graph, PoolAxis, Var};
use crate::nn::{add_batch_norm, Conv};
use crate::param::ParamStore;
use crate::tensor::Scalar;

pub const CAM_REDUCTION: usize = 16;
pub const CAM_MIN_CHANNELS: usize = 8;

/// Coordinate attention: direction-aware pooled descriptors gate the input
/// with a height-wise and a width-wise sigmoid.
#[derive(Clone, Debug)]
pub struct Cam {
    pub channels: usize,
    pub mid: usize,
    pub reduce: Conv,
    pub reduce_bn: BnParams,
    pub head_h: Conv,
    pub head_w: Conv,
}

impl Cam {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        prefix: &str,
        channels: usize,
    ) -> Self {
        let mid = (channels / CAM_REDUCTION).max(CAM_MIN_CHANNELS);
        Self {
            channels,
            mid,
            reduce: Conv::pointwise(store, rng, &format!("{prefix}.reduce"), channels, mid, false),
            reduce_bn: add_batch_norm(store, &format!("{prefix}.reduce_bn"), mid),
            head_h: Conv::pointwise(store, rng, &format!("{prefix}.head_h"), mid, channels, true),
            head_w: Conv::pointwise(store, rng, &format!("{prefix}.head_w"), mid, channels, true),
        }
    }

    /// Returns `(g_h, g_w)` with dims (B, C, H, 1) and (B, C, 1, W).
    pub fn gates<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<(Var, Var)> {
        let d = g.dims(x);
        if d[1] != self.channels {
            return shape_err(format!(
                "CAM expects {} channels, input has {}",
                self.channels, d[1]
            ));
        }
        let (h, w) = (d[2], d[3]);
        let zh = g.directional_avg_pool(x, PoolAxis::Horizontal)?;
        let zw = g.directional_avg_pool(x, PoolAxis::Vertical)?;
        let zw = g.transpose_hw(zw)?;
        let z = g.concat_height(&[zh, zw])?;
        let z = self.reduce.forward(g, z)?;
        let z = g.batch_norm(z, &self.reduce_bn)?;
        let z = g.relu(z)?;
        let a_h = g.slice_height(z, 0, h)?;
        let a_w = g.slice_height(z, h, w)?;
        let a_w = g.transpose_hw(a_w)?;
        let gh = self.head_h.forward(g, a_h)?;
        let gh = g.sigmoid(gh)?;
        let gw = self.head_w.forward(g, a_w)?;
        let gw = g.sigmoid(gw)?;
        Ok((gh, gw))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gh, gw) = self.gates(g, x)?;
        let y = g.mul(x, gh)?;
        g.mul(y, gw)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub mode: DecoderMode,
    pub compress4: Conv,
    pub compress5: Conv,
    pub cam1: Option<Cam>,
    pub fuse: Conv,
    pub cam2: Option<Cam>,
}

impl Decoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, cfg: &NetConfig) -> Self {
        let c = cfg.width;
        let cam = cfg.decoder == DecoderMode::Cam;
        let compress4 = Conv::pointwise(store, rng, "decoder.compress4", 4 * c, 2 * c, false);
        let compress5 = Conv::pointwise(store, rng, "decoder.compress5", 8 * c, 2 * c, false);
        let cam1 = cam.then(|| Cam::new(store, rng, "decoder.cam1", 6 * c));
        let fuse = Conv::pointwise(store, rng, "decoder.fuse", 6 * c, 2 * c, false);
        let cam2 = cam.then(|| Cam::new(store, rng, "decoder.cam2", 2 * c));
        Self {
            mode: cfg.decoder,
            compress4,
            compress5,
            cam1,
            fuse,
            cam2,
        }
    }

    /// Fused features at stage-3 resolution with `2c` channels.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, s: &StageOutputs) -> Result<Var> {
        let p4 = self.compress4.forward(g, s.s4)?;
        let p4 = g.upsample_bilinear(p4, 2)?;
        let p5 = self.compress5.forward(g, s.s5)?;
        let p5 = g.upsample_bilinear(p5, 4)?;
        let (d3, d4, d5) = (g.dims(s.s3), g.dims(p4), g.dims(p5));
        if d3[2..] != d4[2..] || d3[2..] != d5[2..] {
            return shape_err(format!(
                "decoder branches disagree on resolution: s3 {:?}, s4 {:?}, s5 {:?}",
                d3, d4, d5
            ));
        }
        let mut f = g.concat_channels(&[s.s3, p4, p5])?;
        if let Some(cam) = &self.cam1 {
            f = cam.forward(g, f)?;
        }
        let fused = self.fuse.forward(g, f)?;
        match &self.cam2 {
            Some(cam) => {
                let att = cam.forward(g, fused)?;
                g.add(fused, att)
            }
            None => Ok(fused),
        }
    }
}
