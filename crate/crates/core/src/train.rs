//! Training loop: augmentation, the weighted multi-head loss, AdamW with a
//! per-step warmup + cosine schedule, and per-epoch logging.
//!
//! Every random choice (model init, shuffling, augmentation) derives from
//! `TrainConfig::seed`, so two runs with the same inputs produce identical
//! logs and checkpoints.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment, feasible_scales, AugmentPolicy};
use crate::backbone::{check_input_size, NetConfig};
use crate::checkpoint::Checkpoint;
use crate::dataset::Dataset;
use crate::error::{config_err, Result};
use crate::graph::{Graph, Mode};
use crate::heads::{boundary_targets, total_loss, LossOptions, LossWeights};
use crate::metrics::ConfusionMatrix;
use crate::model::{argmax, Model, Purpose};
use crate::optim::{lr_at, AdamW, AdamWConfig};
use crate::tensor::{Scalar, Tensor};
use crate::tiling::infer_whole;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub net: NetConfig,
    /// Boundary dilation radius.
    pub d: usize,
    pub weights: LossWeights,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch: usize,
    /// Square training crop; whole images when absent.
    pub crop: Option<usize>,
    pub seed: u64,
    /// Train the three auxiliary heads (cross-entropy and boundary loss).
    pub aux_losses: bool,
    pub boundary_on_main: bool,
    /// Flips, rotations, rescaling and colour jitter.
    pub augment: bool,
}

impl TrainConfig {
    pub fn new(net: NetConfig) -> Self {
        Self {
            net,
            d: 8,
            weights: LossWeights::default(),
            lr: 1e-3,
            weight_decay: AdamWConfig::default().weight_decay,
            epochs: 100,
            warmup_epochs: 10,
            batch: 4,
            crop: None,
            seed: 0,
            aux_losses: true,
            boundary_on_main: false,
            augment: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.weights.validate()?;
        if self.d < 1 {
            return config_err("boundary dilation d must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return config_err(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return config_err(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if self.epochs < 1 || self.batch < 1 {
            return config_err("epochs and batch must be >= 1");
        }
        if self.warmup_epochs >= self.epochs {
            return config_err(format!(
                "warmup_epochs ({}) must be fewer than epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if let Some(c) = self.crop {
            check_input_size(c, c)?;
        }
        if !self.aux_losses && !self.boundary_on_main && self.weights.main == 0.0 {
            return config_err("every loss term is disabled or has zero weight");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean main cross-entropy over the epoch's batches.
    pub l_m: f64,
    pub l_a: f64,
    pub l_b: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// MIoU of evaluation-mode predictions on the unaugmented training set.
    pub train_miou: f64,
}

pub const CSV_HEADER: &str = "epoch,l_m,l_a,l_b,lr,train_miou";

/// CSV text with full-precision floats.
pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for e in log {
        let _ = writeln!(s, "{},{:?},{:?},{:?},{:?},{:?}", e.epoch, e.l_m, e.l_a, e.l_b, e.lr, e.train_miou);
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters after the last step.
    pub model: Model<f32>,
    /// Checkpoint of the epoch with the highest training MIoU (earliest on ties).
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub best_miou: f64,
    pub log: Vec<EpochLog>,
}

/// Confusion matrix of whole-image predictions over a dataset.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.config().classes);
    for s in &data.samples {
        let pred = argmax(&infer_whole(model, &s.image.to_tensor())?).remove(0);
        cm.accumulate(&pred, &s.mask)?;
    }
    Ok(cm)
}

fn check_data(cfg: &TrainConfig, data: &Dataset) -> Result<()> {
    if data.classes() != cfg.net.classes {
        return config_err(format!(
            "palette has {} classes but the network is configured for K={}",
            data.classes(),
            cfg.net.classes
        ));
    }
    if data.samples.is_empty() {
        return config_err("training set is empty");
    }
    let sizes: Vec<(usize, usize)> = data.samples.iter().map(|s| (s.image.height(), s.image.width())).collect();
    match cfg.crop {
        Some(c) => {
            if let Some(s) = data.samples.iter().find(|s| s.image.height() < c || s.image.width() < c) {
                return config_err(format!(
                    "{} is {}x{}, smaller than crop {c}",
                    s.name,
                    s.image.height(),
                    s.image.width()
                ));
            }
        }
        None => {
            for (s, &(h, w)) in data.samples.iter().zip(&sizes) {
                check_input_size(h, w).map_err(|e| crate::Error::Config(format!("{}: {e}; set a crop", s.name)))?;
            }
            if cfg.batch > 1 && sizes.iter().any(|&d| d != sizes[0]) {
                return config_err("images differ in size; set a crop or batch = 1");
            }
        }
    }
    Ok(())
}

pub fn train(cfg: &TrainConfig, data: &Dataset, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_data(cfg, data)?;
    let purpose = if cfg.aux_losses { Purpose::Train } else { Purpose::Inference };
    let mut model = Model::<f32>::new(&cfg.net, purpose, cfg.seed)?;
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);

    let n = data.samples.len();
    let per_epoch = n.div_ceil(cfg.batch);
    let total = cfg.epochs * per_epoch;
    let warmup = cfg.warmup_epochs * per_epoch;
    let opts = LossOptions {
        boundary_on_main: cfg.boundary_on_main,
    };
    let base_policy = if cfg.augment {
        AugmentPolicy::full(cfg.crop)
    } else {
        AugmentPolicy {
            crop: cfg.crop,
            ..AugmentPolicy::identity()
        }
    };

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(Checkpoint, usize, f64)> = None;
    let mut step = 0;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sums, mut seen) = ([0.0f64; 3], 0usize);
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let mut images = Vec::with_capacity(chunk.len());
            let mut masks = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let s = &data.samples[i];
                let mut policy = base_policy.clone();
                // Without an explicit crop, rescaled images are cropped back to a square
                // of the shorter side, so only upscaling remains feasible.
                let side = s.image.height().min(s.image.width());
                if cfg.augment {
                    policy.crop = Some(cfg.crop.unwrap_or(side));
                }
                if let Some(c) = policy.crop {
                    policy.scales = feasible_scales(&policy.scales, s.image.height(), s.image.width(), c);
                }
                let (img, mask) = augment(&s.image, &s.mask, &mut rng, &policy)?;
                images.push(img.to_tensor::<f32>());
                masks.push(mask);
            }
            let x = Tensor::stack(&images)?;
            let btargets = boundary_targets(&masks, cfg.d)?;

            lr = lr_at(step, total, warmup, cfg.lr)?;
            let (grads, stats, values) = {
                let mut g = Graph::new(&model.store, Mode::Train);
                let input = g.constant(x)?;
                let out = model.net.forward(&mut g, input)?;
                let aux = cfg.aux_losses.then_some(out.aux.as_slice());
                let terms = total_loss(&mut g, out.main, aux, &masks, &btargets, cfg.weights, opts)?;
                let scalar = |g: &Graph<'_, f32>, v: Option<_>| v.map_or(0.0, |v| g.value(v).data()[0].to_f64());
                let values = [
                    scalar(&g, Some(terms.main)),
                    scalar(&g, terms.aux),
                    scalar(&g, terms.boundary),
                ];
                let grads = g.backward(terms.total, &Tensor::full([1, 1, 1, 1], 1.0))?;
                (grads, g.take_stat_updates(), values)
            };
            model.store.zero_grad();
            model.store.accumulate(&grads);
            model.store.apply_stat_updates(stats);
            opt.step(&mut model.store, lr)?;
            step += 1;

            for (s, v) in sums.iter_mut().zip(values) {
                *s += v * chunk.len() as f64;
            }
            seen += chunk.len();
        }

        let miou = evaluate(&model, data)?.miou().mean;
        let entry = EpochLog {
            epoch: epoch + 1,
            l_m: sums[0] / seen as f64,
            l_a: sums[1] / seen as f64,
            l_b: sums[2] / seen as f64,
            lr,
            train_miou: miou,
        };
        on_epoch(&entry);
        log.push(entry);
        if best.as_ref().is_none_or(|b| miou > b.2) {
            best = Some((Checkpoint::from_model(&model), epoch + 1, miou));
        }
    }
    let (best, best_epoch, best_miou) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        best,
        best_epoch,
        best_miou,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::synth_dataset;
    use std::time::Instant;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            warmup_epochs: 1,
            batch: 2,
            ..TrainConfig::new(NetConfig {
                width: 8,
                ..NetConfig::small(3)
            })
        }
    }

    #[test]
    fn one_epoch_on_two_images_is_quick() {
        let data = synth_dataset(2, 64, 3, 0).unwrap().dataset;
        let cfg = TrainConfig {
            epochs: 1,
            warmup_epochs: 0,
            ..TrainConfig::new(NetConfig::small(3))
        };
        let t = Instant::now();
        let out = train(&cfg, &data, |_| {}).unwrap();
        assert!(t.elapsed().as_secs_f64() < 60.0);
        assert_eq!(out.log.len(), 1);
        assert!(out.log[0].l_m > 0.0 && out.log[0].l_a > 0.0 && out.log[0].l_b > 0.0);
    }

    #[test]
    fn no_aux_zeroes_aux_and_boundary_columns() {
        let data = synth_dataset(2, 64, 3, 1).unwrap().dataset;
        let cfg = TrainConfig {
            aux_losses: false,
            ..tiny_cfg()
        };
        let out = train(&cfg, &data, |_| {}).unwrap();
        assert!(out.log.iter().all(|e| e.l_a == 0.0 && e.l_b == 0.0));
        assert!(out.model.store.iter().all(|(_, p)| !p.name.starts_with("aux")));
    }

    #[test]
    fn same_seed_same_run() {
        let data = synth_dataset(3, 64, 3, 2).unwrap().dataset;
        let cfg = TrainConfig {
            crop: Some(64),
            ..tiny_cfg()
        };
        let a = train(&cfg, &data, |_| {}).unwrap();
        let b = train(&cfg, &data, |_| {}).unwrap();
        assert_eq!(log_csv(&a.log), log_csv(&b.log));
        assert_eq!(a.best.encode(), b.best.encode());
        let c = train(&TrainConfig { seed: 9, ..cfg }, &data, |_| {}).unwrap();
        assert_ne!(log_csv(&a.log), log_csv(&c.log));
    }

    #[test]
    fn lr_column_follows_schedule() {
        let data = synth_dataset(4, 64, 3, 3).unwrap().dataset;
        let cfg = TrainConfig {
            epochs: 3,
            augment: false,
            ..tiny_cfg()
        };
        let out = train(&cfg, &data, |_| {}).unwrap();
        // Two steps per epoch; the logged rate is the epoch's last step.
        for (e, step) in out.log.iter().zip([1, 3, 5]) {
            assert_eq!(e.lr, lr_at(step, 6, 2, cfg.lr).unwrap());
        }
        let csv = log_csv(&out.log);
        assert!(csv.starts_with("epoch,l_m,l_a,l_b,lr,train_miou\n1,"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn config_and_data_errors() {
        let data = synth_dataset(2, 64, 3, 0).unwrap().dataset;
        let bad = [
            TrainConfig { warmup_epochs: 2, ..tiny_cfg() },
            TrainConfig { crop: Some(48), ..tiny_cfg() },
            TrainConfig { crop: Some(96), ..tiny_cfg() },
            TrainConfig { lr: 0.0, ..tiny_cfg() },
            TrainConfig {
                net: NetConfig::small(5),
                ..tiny_cfg()
            },
        ];
        for cfg in bad {
            assert!(train(&cfg, &data, |_| {}).is_err(), "{cfg:?}");
        }
    }
}
