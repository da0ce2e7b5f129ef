//! Multi-branch kernel-sharing atrous convolution (MKA) module.
//!
//! One 3x3 depthwise kernel is scanned over the input at dilation rates
//! `1..=M`. Branch `i` is batch-normalized, and for `i >= 2` smoothed by a
//! depthwise `(2i-1)x(2i-1)` convolution plus batch norm. The branch outputs
//! are concatenated in branch order and fused back to `N` channels by a
//! biased pointwise convolution followed by ReLU.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conv::ConvSpec;
use crate::error::{shape_err, Result};
use crate::graph::{BnParams, Graph, Var};
use crate::nn::{add_batch_norm, add_bias, add_kernel};
use crate::param::{ParamId, ParamKind, ParamStore};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MkaConfig {
    /// Input and output channels `N`.
    pub channels: usize,
    /// Number of dilation branches `M`.
    pub branches: usize,
}

impl MkaConfig {
    pub fn new(channels: usize, branches: usize) -> Self {
        Self { channels, branches }
    }
}

/// Whether the atrous branches read one shared kernel or one kernel each.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelSharing {
    Shared,
    /// One kernel per branch, all initialized to the same values.
    Independent,
}

/// Convolution weight counts of one module, biases and batch norm excluded.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MkaParamCount {
    pub part1: usize,
    pub part2: usize,
    pub part3: usize,
    pub total: usize,
}

/// Closed-form conv-weight count: `9N`, `((4M^3 - M)/3 - 1) N`, `M N^2`.
pub fn mka_param_count(cfg: MkaConfig) -> MkaParamCount {
    let (n, m) = (cfg.channels, cfg.branches);
    let part1 = 9 * n;
    let part2 = ((4 * m * m * m - m) / 3 - 1) * n;
    let part3 = m * n * n;
    MkaParamCount {
        part1,
        part2,
        part3,
        total: part1 + part2 + part3,
    }
}

/// Side length of the receptive field: `1 + sum (k - 1) * dilation` along
/// the deepest branch.
pub fn mka_receptive_field(cfg: MkaConfig) -> usize {
    (1..=cfg.branches)
        .map(|i| {
            let atrous = 2 * i;
            let smooth = if i >= 2 { 2 * i - 2 } else { 0 };
            1 + atrous + smooth
        })
        .max()
        .unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct SmoothConv {
    pub kernel: ParamId,
    pub size: usize,
    pub bn: BnParams,
}

#[derive(Clone, Debug)]
pub struct MkaModule {
    pub cfg: MkaConfig,
    /// One kernel when shared, `M` otherwise.
    pub atrous_kernels: Vec<ParamId>,
    pub branch_bns: Vec<BnParams>,
    /// Smoothing convs for branches `2..=M`.
    pub smooth: Vec<SmoothConv>,
    pub fuse: ParamId,
    pub fuse_bias: ParamId,
}

impl MkaModule {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        prefix: &str,
        cfg: MkaConfig,
    ) -> Self {
        Self::with_sharing(store, rng, prefix, cfg, KernelSharing::Shared)
    }

    pub fn with_sharing<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        prefix: &str,
        cfg: MkaConfig,
        sharing: KernelSharing,
    ) -> Self {
        assert!(cfg.branches >= 1 && cfg.channels >= 1, "invalid {cfg:?}");
        let n = cfg.channels;
        let m = cfg.branches;
        let shared = add_kernel(store, rng, format!("{prefix}.shared"), [n, 1, 3, 3]);
        let mut atrous_kernels = vec![shared];
        if sharing == KernelSharing::Independent {
            let value = store.value(shared).clone();
            for i in 2..=m {
                atrous_kernels.push(store.add(
                    format!("{prefix}.kernel{i}"),
                    value.clone(),
                    ParamKind::Weight,
                ));
            }
        }
        let branch_bns = (1..=m)
            .map(|i| add_batch_norm(store, &format!("{prefix}.bn{i}"), n))
            .collect();
        let smooth = (2..=m)
            .map(|i| {
                let size = 2 * i - 1;
                SmoothConv {
                    kernel: add_kernel(store, rng, format!("{prefix}.smooth{i}"), [n, 1, size, size]),
                    size,
                    bn: add_batch_norm(store, &format!("{prefix}.smooth_bn{i}"), n),
                }
            })
            .collect();
        let fuse = add_kernel(store, rng, format!("{prefix}.fuse"), [n, m * n, 1, 1]);
        let fuse_bias = add_bias(store, format!("{prefix}.fuse_bias"), n);
        Self {
            cfg,
            atrous_kernels,
            branch_bns,
            smooth,
            fuse,
            fuse_bias,
        }
    }

    /// Output of branch `i` (1-based) after Parts 1 and 2.
    pub fn branch<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, i: usize) -> Result<Var> {
        let n = self.cfg.channels;
        let k = g.param(self.atrous_kernels[(i - 1).min(self.atrous_kernels.len() - 1)])?;
        let y = g.conv2d(x, k, ConvSpec::depthwise(n, 3, i))?;
        let mut y = g.batch_norm(y, &self.branch_bns[i - 1])?;
        if i >= 2 {
            let s = &self.smooth[i - 2];
            let sk = g.param(s.kernel)?;
            y = g.conv2d(y, sk, ConvSpec::depthwise(n, s.size, 1))?;
            y = g.batch_norm(y, &s.bn)?;
        }
        Ok(y)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let d = g.dims(x);
        if d[1] != self.cfg.channels {
            return shape_err(format!(
                "MKA module expects {} channels, input has {}",
                self.cfg.channels, d[1]
            ));
        }
        let branches = (1..=self.cfg.branches)
            .map(|i| self.branch(g, x, i))
            .collect::<Result<Vec<_>>>()?;
        let cat = g.concat_channels(&branches)?;
        let w = g.param(self.fuse)?;
        let y = g.conv2d(cat, w, ConvSpec::pointwise())?;
        let b = g.param(self.fuse_bias)?;
        let y = g.add_bias(y, b)?;
        g.relu(y)
    }

    /// Convolution weights actually held by this module.
    pub fn conv_weight_count<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        let atrous: usize = self
            .atrous_kernels
            .iter()
            .map(|&k| store.value(k).numel())
            .sum();
        let smooth: usize = self.smooth.iter().map(|s| store.value(s.kernel).numel()).sum();
        atrous + smooth + store.value(self.fuse).numel()
    }

    /// Biases and batch-norm affine values (running stats excluded).
    pub fn affine_count<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        let bn = |b: &BnParams| store.value(b.gamma).numel() + store.value(b.beta).numel();
        self.branch_bns.iter().map(bn).sum::<usize>()
            + self.smooth.iter().map(|s| bn(&s.bn)).sum::<usize>()
            + store.value(self.fuse_bias).numel()
    }

    /// Every parameter id owned by the module.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.atrous_kernels.clone();
        let bn_ids = |b: &BnParams| [b.gamma, b.beta, b.running_mean, b.running_var];
        for b in &self.branch_bns {
            ids.extend(bn_ids(b));
        }
        for s in &self.smooth {
            ids.push(s.kernel);
            ids.extend(bn_ids(&s.bn));
        }
        ids.push(self.fuse);
        ids.push(self.fuse_bias);
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckOptions};
    use crate::graph::Mode;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(n: usize, m: usize, seed: u64) -> (ParamStore<f64>, MkaModule) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let module = MkaModule::new(&mut store, &mut rng, "mka", MkaConfig::new(n, m));
        (store, module)
    }

    fn run(store: &ParamStore<f64>, module: &MkaModule, x: &Tensor<f64>, mode: Mode) -> Tensor<f64> {
        let mut g = Graph::new(store, mode);
        let v = g.input(x.clone()).unwrap();
        let y = module.forward(&mut g, v).unwrap();
        g.value(y).clone()
    }

    // Direct-loop depthwise cross-correlation with "same" zero padding.
    fn naive_depthwise(x: &Tensor<f64>, k: &Tensor<f64>, dil: usize) -> Tensor<f64> {
        let [b, c, h, w] = x.dims();
        let ks = k.height();
        let pad = (dil * (ks - 1) / 2) as isize;
        Tensor::from_fn([b, c, h, w], |[n, ch, r, q]| {
            let mut s = 0.0;
            for i in 0..ks {
                for j in 0..ks {
                    let yy = r as isize + (i * dil) as isize - pad;
                    let xx = q as isize + (j * dil) as isize - pad;
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        s += k.at(ch, 0, i, j) * x.at(n, ch, yy as usize, xx as usize);
                    }
                }
            }
            s
        })
    }

    fn naive_bn_train(x: &Tensor<f64>, store: &ParamStore<f64>, bn: &BnParams) -> Tensor<f64> {
        let [b, c, h, w] = x.dims();
        let cnt = (b * h * w) as f64;
        let mut stats = Vec::new();
        for ch in 0..c {
            let vals: Vec<f64> = (0..b * h * w)
                .map(|i| x.at(i / (h * w), ch, (i / w) % h, i % w))
                .collect();
            let m = vals.iter().sum::<f64>() / cnt;
            let v = vals.iter().map(|z| (z - m).powi(2)).sum::<f64>() / cnt;
            stats.push((m, v));
        }
        let gm = store.value(bn.gamma);
        let bt = store.value(bn.beta);
        Tensor::from_fn(x.dims(), |[n, ch, r, q]| {
            let (m, v) = stats[ch];
            gm.at(0, ch, 0, 0) * (x.at(n, ch, r, q) - m) / (v + 1e-5).sqrt() + bt.at(0, ch, 0, 0)
        })
    }

    #[test]
    fn closed_form_examples() {
        let c = mka_param_count(MkaConfig::new(1, 3));
        assert_eq!(c.part2, 3 * 3 + 5 * 5);
        let c = mka_param_count(MkaConfig::new(8, 1));
        assert_eq!((c.part2, c.total), (0, 136));
        let c = mka_param_count(MkaConfig::new(64, 3));
        assert_eq!(c.total, 9 * 64 + 34 * 64 + 3 * 64 * 64);
        assert_eq!(c.total, 15040);
    }

    #[test]
    fn part2_matches_kernel_enumeration() {
        for m in 1..=8usize {
            let enumerated: usize = (2..=m).map(|i| (2 * i - 1) * (2 * i - 1)).sum();
            assert_eq!(mka_param_count(MkaConfig::new(1, m)).part2, enumerated);
        }
    }

    #[test]
    fn built_module_matches_closed_form() {
        for m in 1..=5 {
            for n in [1, 8, 64] {
                let (store, module) = build(n, m, 0);
                assert_eq!(module.conv_weight_count(&store), mka_param_count(MkaConfig::new(n, m)).total);
                // Branch BNs, smoothing BNs and the fuse bias.
                assert_eq!(module.affine_count(&store), 2 * n * m + 2 * n * (m - 1) + n);
            }
        }
    }

    #[test]
    fn receptive_field_path_arithmetic() {
        assert_eq!(mka_receptive_field(MkaConfig::new(4, 1)), 3);
        assert_eq!(mka_receptive_field(MkaConfig::new(4, 2)), 7);
        assert_eq!(mka_receptive_field(MkaConfig::new(4, 3)), 11);
        // Five serial 3x3 layers.
        assert_eq!(mka_receptive_field(MkaConfig::new(4, 3)), 1 + 5 * 2);
    }

    #[test]
    fn zero_kernels_give_zero_output() {
        let (mut store, module) = build(3, 3, 1);
        for id in module.param_ids() {
            if store.get(id).kind == ParamKind::Weight {
                let d = store.value(id).dims();
                store.set_value(id, Tensor::zeros(d)).unwrap();
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::uniform([1, 3, 8, 8], 1.0, &mut rng);
        for mode in [Mode::Train, Mode::Eval] {
            assert_eq!(run(&store, &module, &x, mode).max_abs(), 0.0);
        }
    }

    #[test]
    fn single_branch_is_conv_bn_pointwise() {
        let (store, module) = build(1, 1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::uniform([2, 1, 6, 6], 1.0, &mut rng);
        let got = run(&store, &module, &x, Mode::Train);
        let y = naive_depthwise(&x, store.value(module.atrous_kernels[0]), 1);
        let y = naive_bn_train(&y, &store, &module.branch_bns[0]);
        let w = store.value(module.fuse).at(0, 0, 0, 0);
        let expect = y.map(|v| (w * v).max(0.0));
        for (a, b) in got.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn straight_line_oracle() {
        let (mut store, module) = build(2, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for id in module.param_ids() {
            let p = store.get(id);
            if p.kind == ParamKind::Norm || p.kind == ParamKind::Bias {
                let d = p.value.dims();
                store.set_value(id, Tensor::uniform(d, 0.5, &mut rng).map(|v| v + 1.0)).unwrap();
            }
        }
        let x = Tensor::uniform([1, 2, 16, 16], 1.0, &mut rng);
        let got = run(&store, &module, &x, Mode::Train);

        let shared = store.value(module.atrous_kernels[0]);
        let mut branches = Vec::new();
        for i in 1..=3 {
            let mut y = naive_bn_train(&naive_depthwise(&x, shared, i), &store, &module.branch_bns[i - 1]);
            if i >= 2 {
                let s = &module.smooth[i - 2];
                y = naive_bn_train(&naive_depthwise(&y, store.value(s.kernel), 1), &store, &s.bn);
            }
            branches.push(y);
        }
        let fuse = store.value(module.fuse);
        let bias = store.value(module.fuse_bias);
        let expect = Tensor::<f64>::from_fn([1, 2, 16, 16], |[_, o, r, q]| {
            let mut s = bias.at(0, o, 0, 0);
            for (bi, y) in branches.iter().enumerate() {
                for c in 0..2 {
                    s += fuse.at(o, bi * 2 + c, 0, 0) * y.at(0, c, r, q);
                }
            }
            s.max(0.0)
        });
        assert_eq!(got.dims(), x.dims());
        for (a, b) in got.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    // Eval mode with identity statistics, so every BN is the identity.
    fn bypass_bn(store: &mut ParamStore<f64>, module: &MkaModule) {
        let mut bns: Vec<BnParams> = module.branch_bns.clone();
        bns.extend(module.smooth.iter().map(|s| s.bn));
        for bn in bns {
            let d = store.value(bn.gamma).dims();
            store.set_value(bn.gamma, Tensor::full(d, 1.0)).unwrap();
            store.set_value(bn.beta, Tensor::zeros(d)).unwrap();
            store.set_value(bn.running_mean, Tensor::zeros(d)).unwrap();
            store.set_value(bn.running_var, Tensor::full(d, 1.0 - 1e-5)).unwrap();
        }
    }

    #[test]
    fn shared_kernel_reaches_every_branch() {
        let (mut store, module) = build(2, 3, 7);
        bypass_bn(&mut store, &module);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::uniform([1, 2, 12, 12], 1.0, &mut rng);
        let branch_outputs = |store: &ParamStore<f64>| -> Vec<Tensor<f64>> {
            let mut g = Graph::new(store, Mode::Eval);
            let v = g.input(x.clone()).unwrap();
            (1..=3)
                .map(|i| {
                    let k = g.param(module.atrous_kernels[0]).unwrap();
                    let y = g.conv2d(v, k, ConvSpec::depthwise(2, 3, i)).unwrap();
                    let y = g.batch_norm(y, &module.branch_bns[i - 1]).unwrap();
                    g.value(y).clone()
                })
                .collect()
        };
        let before = branch_outputs(&store);
        for entry in 0..18 {
            let mut perturbed = store.clone();
            perturbed.get_mut(module.atrous_kernels[0]).value.data_mut()[entry] += 0.5;
            let after = branch_outputs(&perturbed);
            for (b, a) in before.iter().zip(&after) {
                assert_ne!(a, b, "entry {entry} left a branch unchanged");
            }
        }
    }

    #[test]
    fn shared_gradient_is_sum_over_cloned_kernels() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = MkaConfig::new(3, 3);
            let mut s1 = ParamStore::<f64>::new();
            let shared = MkaModule::with_sharing(&mut s1, &mut ChaCha8Rng::seed_from_u64(seed), "m", cfg, KernelSharing::Shared);
            let mut s2 = ParamStore::<f64>::new();
            let cloned = MkaModule::with_sharing(&mut s2, &mut ChaCha8Rng::seed_from_u64(seed), "m", cfg, KernelSharing::Independent);
            let x = Tensor::<f64>::uniform([2, 3, 8, 8], 1.0, &mut rng);
            let seed_t = Tensor::<f64>::uniform([2, 3, 8, 8], 1.0, &mut rng);
            let grad_of = |store: &ParamStore<f64>, m: &MkaModule| {
                let mut g = Graph::new(store, Mode::Train);
                let v = g.input(x.clone()).unwrap();
                let y = m.forward(&mut g, v).unwrap();
                let grads = g.backward(y, &seed_t).unwrap();
                let found: Vec<(ParamId, Vec<f64>)> = grads.params().map(|(i, d)| (i, d.to_vec())).collect();
                m.atrous_kernels
                    .iter()
                    .map(|k| found.iter().find(|(i, _)| i == k).unwrap().1.clone())
                    .collect::<Vec<_>>()
            };
            let gs = grad_of(&s1, &shared);
            let gc = grad_of(&s2, &cloned);
            assert_eq!((gs.len(), gc.len()), (1, 3));
            for j in 0..27 {
                let sum: f64 = gc.iter().map(|g| g[j]).sum();
                let rel = (gs[0][j] - sum).abs() / sum.abs().max(1e-12);
                assert!(rel < 1e-6, "seed {seed} entry {j}: {} vs {sum}", gs[0][j]);
            }
        }
    }

    #[test]
    fn empirical_receptive_field_is_eleven() {
        let (mut store, module) = build(1, 3, 9);
        bypass_bn(&mut store, &module);
        for id in module.param_ids() {
            if store.get(id).kind == ParamKind::Weight {
                let d = store.value(id).dims();
                store.set_value(id, Tensor::full(d, 0.1)).unwrap();
            }
        }
        store.set_value(module.fuse_bias, Tensor::full([1, 1, 1, 1], 1.0)).unwrap();
        let x = Tensor::<f64>::full([1, 1, 21, 21], 0.5);
        let mut g = Graph::new(&store, Mode::Eval);
        let v = g.input(x).unwrap();
        let y = module.forward(&mut g, v).unwrap();
        let seed = Tensor::from_fn([1, 1, 21, 21], |[_, _, r, q]| (r == 10 && q == 10) as u8 as f64);
        let grad = g.backward(y, &seed).unwrap().wrt(v).unwrap();
        for r in 0..21 {
            for q in 0..21 {
                let inside = (5..=15).contains(&r) && (5..=15).contains(&q);
                assert_eq!(grad.at(0, 0, r, q).abs() > 1e-12, inside, "({r},{q})");
            }
        }
    }

    #[test]
    fn passes_gradient_check() {
        let (store, module) = build(4, 3, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::uniform([1, 4, 8, 8], 1.0, &mut rng);
        for mode in [Mode::Train, Mode::Eval] {
            let r = grad_check(&store, std::slice::from_ref(&x), mode, |g, v| module.forward(g, v[0]), &GradCheckOptions::default()).unwrap();
            assert!(r.passed, "{mode:?}: {r:?}");
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let (store, module) = build(2, 2, 0);
        let mut g = Graph::new(&store, Mode::Eval);
        let v = g.input(Tensor::zeros([1, 3, 4, 4])).unwrap();
        assert!(module.forward(&mut g, v).is_err());
    }
}
