//! The full network: encoder, decoder, main head and the optional
//! auxiliary heads used only while training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{check_input_size, DecoderMode, Encoder, NetConfig, StageOutputs};
use crate::decoder::{Decoder, CAM_MIN_CHANNELS, CAM_REDUCTION};
use crate::error::{shape_err, Result};
use crate::graph::{Graph, Mode, Var};
use crate::heads::SegHead;
use crate::mask::ClassMask;
use crate::mka::{mka_param_count, MkaConfig};
use crate::param::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Upsampling factors of the heads on stages 3, 4 and 5.
pub const AUX_FACTORS: [usize; 3] = [8, 16, 32];
/// Parameter-name prefix shared by the auxiliary heads.
pub const AUX_PREFIX: &str = "aux";

/// Whether the auxiliary heads are built.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    Train,
    Inference,
}

#[derive(Clone, Debug)]
pub struct MkaNet {
    pub cfg: NetConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub head: SegHead,
    pub aux: Vec<SegHead>,
}

/// Logits at input resolution.
#[derive(Clone, Debug)]
pub struct Outputs {
    pub main: Var,
    /// Stage 3, 4 and 5 heads, empty for inference networks.
    pub aux: Vec<Var>,
}

impl MkaNet {
    /// Registers all parameters in `store`. The main path is initialized
    /// before the auxiliary heads, so a training and an inference network
    /// built from the same seed agree on every shared parameter.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        cfg: &NetConfig,
        purpose: Purpose,
    ) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(store, rng, cfg);
        let decoder = Decoder::new(store, rng, cfg);
        let c = cfg.width;
        let head = SegHead::new(store, rng, "head", 2 * c, cfg.classes, 8);
        let aux = match purpose {
            Purpose::Train => [2 * c, 4 * c, 8 * c]
                .iter()
                .zip(AUX_FACTORS)
                .enumerate()
                .map(|(i, (&ch, up))| {
                    SegHead::new(store, rng, &format!("{AUX_PREFIX}{}", i + 3), ch, cfg.classes, up)
                })
                .collect(),
            Purpose::Inference => Vec::new(),
        };
        Ok(Self {
            cfg: cfg.clone(),
            encoder,
            decoder,
            head,
            aux,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<Outputs> {
        let s: StageOutputs = self.encoder.forward(g, image)?;
        let f = self.decoder.forward(g, &s)?;
        let main = self.head.forward(g, f)?;
        let aux = if self.aux.is_empty() {
            Vec::new()
        } else {
            [s.s3, s.s4, s.s5]
                .iter()
                .zip(&self.aux)
                .map(|(&x, h)| h.forward(g, x))
                .collect::<Result<Vec<_>>>()?
        };
        Ok(Outputs { main, aux })
    }
}

/// A network together with its parameter values.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    pub net: MkaNet,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: &NetConfig, purpose: Purpose, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = MkaNet::new(&mut store, &mut rng, cfg, purpose)?;
        Ok(Self { net, store })
    }

    pub fn config(&self) -> &NetConfig {
        &self.net.cfg
    }

    /// Main-head logits in evaluation mode, (B, K, H, W).
    pub fn infer_logits(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new(&self.store, Mode::Eval);
        let x = g.constant(image.clone())?;
        let out = self.net.forward(&mut g, x)?;
        Ok(g.value(out.main).clone())
    }

    /// Per-pixel argmax of the main head.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Vec<ClassMask>> {
        Ok(argmax(&self.infer_logits(image)?))
    }

    /// Trainable parameter count (weights, biases and batch-norm affine).
    pub fn param_count(&self) -> usize {
        self.store.count_where(|p| p.trainable)
    }

    /// Copy of the parameters without the auxiliary heads.
    pub fn inference_store(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (_, p) in self.store.iter() {
            if !p.name.starts_with(AUX_PREFIX) {
                out.add(p.name.clone(), p.value.clone(), p.kind);
            }
        }
        out
    }
}

/// Class index of the largest logit per pixel; ties go to the lower index.
pub fn argmax<T: Scalar>(logits: &Tensor<T>) -> Vec<ClassMask> {
    let [b, k, h, w] = logits.dims();
    let plane = h * w;
    let d = logits.data();
    (0..b)
        .map(|n| {
            let labels = (0..plane)
                .map(|p| {
                    let mut best = 0;
                    let mut bv = f64::NEG_INFINITY;
                    for c in 0..k {
                        let v = d[(n * k + c) * plane + p].to_f64();
                        if v > bv {
                            bv = v;
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            ClassMask::new(h, w, labels).expect("argmax dims")
        })
        .collect()
}

/// Parameters and multiply-accumulates of one block of the network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockCost {
    pub name: String,
    /// Trainable values: conv weights, biases and batch-norm affine.
    pub params: usize,
    /// Convolution weights alone.
    pub conv_weights: usize,
    /// Of which inside MKA modules, per the closed form.
    pub mka_conv_weights: usize,
    /// Convolution multiply-accumulates for one image.
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComplexityReport {
    pub height: usize,
    pub width: usize,
    pub blocks: Vec<BlockCost>,
}

impl ComplexityReport {
    pub fn total_params(&self) -> usize {
        self.blocks.iter().map(|b| b.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.blocks.iter().map(|b| b.macs).sum()
    }
}

struct Acc {
    params: usize,
    conv: usize,
    mka: usize,
    macs: u64,
}

impl Acc {
    fn new() -> Self {
        Self {
            params: 0,
            conv: 0,
            mka: 0,
            macs: 0,
        }
    }

    /// Convolution `cin -> cout` (grouped by `groups`) producing `pixels` outputs.
    fn conv(&mut self, cin: usize, cout: usize, k: usize, groups: usize, pixels: usize, bias: bool) {
        let w = cout * (cin / groups) * k * k;
        self.params += w + if bias { cout } else { 0 };
        self.conv += w;
        self.macs += (w * pixels) as u64;
    }

    fn bn(&mut self, c: usize) {
        self.params += 2 * c;
    }

    fn mka(&mut self, n: usize, m: usize, pixels: usize) {
        let before = self.conv;
        self.conv(n, n, 3, n, pixels, false);
        // The shared kernel is applied once per branch.
        self.macs += (9 * n * pixels * (m - 1)) as u64;
        for i in 1..=m {
            self.bn(n);
            if i >= 2 {
                self.conv(n, n, 2 * i - 1, n, pixels, false);
                self.bn(n);
            }
        }
        self.conv(m * n, n, 1, 1, pixels, true);
        self.mka += self.conv - before;
    }

    fn cam(&mut self, c: usize, h: usize, w: usize) {
        let mid = (c / CAM_REDUCTION).max(CAM_MIN_CHANNELS);
        self.conv(c, mid, 1, 1, h + w, false);
        self.bn(mid);
        self.conv(mid, c, 1, 1, h, true);
        self.conv(mid, c, 1, 1, w, true);
    }

    fn head(&mut self, c: usize, k: usize, pixels: usize) {
        let mid = (c / 2).max(1);
        self.conv(c, mid, 3, 1, pixels, false);
        self.bn(mid);
        self.conv(mid, k, 1, 1, pixels, true);
    }

    fn finish(self, name: impl Into<String>) -> BlockCost {
        BlockCost {
            name: name.into(),
            params: self.params,
            conv_weights: self.conv,
            mka_conv_weights: self.mka,
            macs: self.macs,
        }
    }
}

/// Closed-form cost of every block for one `height x width` image.
pub fn complexity(cfg: &NetConfig, height: usize, width: usize, purpose: Purpose) -> Result<ComplexityReport> {
    cfg.validate()?;
    check_input_size(height, width)?;
    let ch = cfg.stage_channels();
    let mut blocks = Vec::new();
    let mut cin = 3;
    for (i, &cout) in ch.iter().enumerate() {
        let s = i + 1;
        let (h, w) = (height >> s, width >> s);
        let mut a = Acc::new();
        a.conv(cin, cout, 3, 1, h * w, false);
        a.bn(cout);
        if s >= 3 {
            for _ in 0..cfg.repeats {
                a.mka(cout, cfg.branches, h * w);
            }
        }
        debug_assert_eq!(
            a.mka,
            if s >= 3 {
                cfg.repeats * mka_param_count(MkaConfig::new(cout, cfg.branches)).total
            } else {
                0
            }
        );
        blocks.push(a.finish(format!("stage{s}")));
        cin = cout;
    }
    let c = cfg.width;
    let (h3, w3) = (height / 8, width / 8);
    let mut a = Acc::new();
    a.conv(4 * c, 2 * c, 1, 1, h3 * w3 / 4, false);
    a.conv(8 * c, 2 * c, 1, 1, h3 * w3 / 16, false);
    if cfg.decoder == DecoderMode::Cam {
        a.cam(6 * c, h3, w3);
    }
    a.conv(6 * c, 2 * c, 1, 1, h3 * w3, false);
    if cfg.decoder == DecoderMode::Cam {
        a.cam(2 * c, h3, w3);
    }
    blocks.push(a.finish("decoder"));
    let mut a = Acc::new();
    a.head(2 * c, cfg.classes, h3 * w3);
    blocks.push(a.finish("head"));
    if purpose == Purpose::Train {
        for (i, &cs) in [2 * c, 4 * c, 8 * c].iter().enumerate() {
            let mut a = Acc::new();
            a.head(cs, cfg.classes, (height >> (i + 3)) * (width >> (i + 3)));
            blocks.push(a.finish(format!("{AUX_PREFIX}{}", i + 3)));
        }
    }
    Ok(ComplexityReport {
        height,
        width,
        blocks,
    })
}

/// The same breakdown counted from a built model's parameters, with MACs
/// measured by running one forward pass at `height x width`.
pub fn measured_complexity<T: Scalar>(model: &Model<T>, height: usize, width: usize) -> Result<ComplexityReport> {
    check_input_size(height, width)?;
    let store = &model.store;
    let trainable_with_prefix = |prefix: &str| {
        store.count_where(|p| p.trainable && p.name.starts_with(prefix) && p.name[prefix.len()..].starts_with('.'))
    };
    let conv_with_prefix = |prefix: &str| {
        store.count_where(|p| {
            p.kind == crate::param::ParamKind::Weight && p.name.starts_with(prefix) && p.name[prefix.len()..].starts_with('.')
        })
    };
    let mut names: Vec<String> = (1..=5).map(|s| format!("stage{s}")).collect();
    names.push("decoder".into());
    names.push("head".into());
    for i in 0..model.net.aux.len() {
        names.push(format!("{AUX_PREFIX}{}", i + 3));
    }

    // MACs per block from graph deltas.
    let mut g = Graph::new(store, Mode::Eval);
    let x = g.constant(Tensor::zeros([1, 3, height, width]))?;
    let mut macs = Vec::new();
    let mut last = 0;
    let mut mark = |g: &Graph<'_, T>| {
        macs.push(g.macs() - last);
        last = g.macs();
    };
    let mut v = x;
    let mut feats = Vec::new();
    for stage in &model.net.encoder.stages {
        v = stage.down.forward(&mut g, v)?;
        for m in &stage.mkas {
            v = m.forward(&mut g, v)?;
        }
        feats.push(v);
        mark(&g);
    }
    let s = StageOutputs {
        s3: feats[2],
        s4: feats[3],
        s5: feats[4],
    };
    let f = model.net.decoder.forward(&mut g, &s)?;
    mark(&g);
    model.net.head.forward(&mut g, f)?;
    mark(&g);
    for (h, &x) in model.net.aux.iter().zip(&[s.s3, s.s4, s.s5]) {
        h.forward(&mut g, x)?;
        mark(&g);
    }
    if macs.len() != names.len() {
        return shape_err("block count mismatch while measuring complexity");
    }
    let blocks = names
        .iter()
        .zip(macs)
        .enumerate()
        .map(|(i, (name, m))| {
            let mka = if (2..5).contains(&i) {
                model.net.encoder.stages[i]
                    .mkas
                    .iter()
                    .map(|mk| mk.conv_weight_count(store))
                    .sum()
            } else {
                0
            };
            BlockCost {
                name: name.clone(),
                params: trainable_with_prefix(name),
                conv_weights: conv_with_prefix(name),
                mka_conv_weights: mka,
                macs: m,
            }
        })
        .collect();
    Ok(ComplexityReport {
        height,
        width,
        blocks,
    })
}
