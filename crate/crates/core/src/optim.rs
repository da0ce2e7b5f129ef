//! AdamW with decoupled weight decay, and a warmup + cosine schedule.

use std::f64::consts::PI;

use crate::error::{config_err, Error, Result};
use crate::param::{ParamKind, ParamStore};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state: first/second moments per parameter and the step count.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<Option<Moments>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter from its accumulated gradient.
    /// Batch-norm affine values and biases are not decayed.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        for (_, p) in store.iter() {
            if p.trainable && !p.grad.is_finite() {
                let bad = p
                    .grad
                    .data()
                    .iter()
                    .filter(|v| !v.to_f64().is_finite())
                    .count();
                return Err(Error::NonFinite(format!(
                    "gradient of {} has {} non-finite values; step {} aborted",
                    p.name,
                    bad,
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        for (slot, p) in self.moments.iter_mut().zip(store.iter_mut()) {
            if !p.trainable {
                continue;
            }
            let n = p.value.numel();
            let st = slot.get_or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let decay = if p.kind == ParamKind::Weight {
                weight_decay
            } else {
                0.0
            };
            let grads = p.grad.data();
            let values = p.value.data_mut();
            for i in 0..n {
                let g = grads[i].to_f64();
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * g;
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * g * g;
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                let theta = values[i].to_f64();
                values[i] = T::from_f64(theta - lr * (m_hat / (v_hat.sqrt() + eps) + decay * theta));
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base`, then cosine decay towards 0.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base: f64) -> Result<f64> {
    if warmup_steps >= total_steps {
        return config_err(format!(
            "warmup steps ({warmup_steps}) must be fewer than total steps ({total_steps})"
        ));
    }
    if step >= total_steps {
        return config_err(format!("step {step} is past the last step {}", total_steps - 1));
    }
    if step < warmup_steps {
        return Ok(base * step as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(base * 0.5 * (1.0 + (PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(theta: f64, kind: ParamKind) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("theta", Tensor::full([1, 1, 1, 1], theta), kind);
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = scalar_store(0.7, ParamKind::Weight);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut s, 0.1).unwrap();
        assert_eq!(s.iter().next().unwrap().1.value.data()[0], 0.7);
    }

    #[test]
    fn first_step_is_a_unit_move() {
        let mut s = scalar_store(1.0, ParamKind::Weight);
        s.accumulate_grad(crate::param::ParamId(0), &[1.0]);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut s, 0.1).unwrap();
        let theta = s.iter().next().unwrap().1.value.data()[0];
        // m_hat / sqrt(v_hat) = 1 exactly; only epsilon perturbs the step.
        assert!((theta - 0.9).abs() < 1e-6, "{theta}");
    }

    #[test]
    fn pure_decay_and_norm_exemption() {
        let mut w = scalar_store(2.0, ParamKind::Weight);
        let mut n = scalar_store(2.0, ParamKind::Norm);
        let cfg = AdamWConfig {
            weight_decay: 0.5,
            ..Default::default()
        };
        AdamW::new(cfg).step(&mut w, 0.1).unwrap();
        AdamW::new(cfg).step(&mut n, 0.1).unwrap();
        let tw = w.iter().next().unwrap().1.value.data()[0];
        assert!((tw - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-12);
        assert_eq!(n.iter().next().unwrap().1.value.data()[0], 2.0);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut s = scalar_store(1.0, ParamKind::Weight);
        s.accumulate_grad(crate::param::ParamId(0), &[f64::NAN]);
        let mut opt = AdamW::new(AdamWConfig::default());
        let err = opt.step(&mut s, 0.1).unwrap_err();
        assert!(err.to_string().contains("theta"));
        assert_eq!(opt.steps(), 0);
        assert_eq!(s.iter().next().unwrap().1.value.data()[0], 1.0);
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_at(0, 100, 10, 0.001).unwrap(), 0.0);
        assert_eq!(lr_at(10, 100, 10, 0.001).unwrap(), 0.001);
        assert!(lr_at(99, 100, 10, 0.001).unwrap() < 1e-6);
        assert!(lr_at(10, 10, 10, 0.001).is_err());
        assert!(lr_at(100, 100, 10, 0.001).is_err());
    }

    #[test]
    fn schedule_is_continuous_and_decays() {
        let (total, warm, base) = (500, 50, 0.001);
        let before = lr_at(warm - 1, total, warm, base).unwrap();
        let at = lr_at(warm, total, warm, base).unwrap();
        assert!((at - before - base / warm as f64).abs() < 1e-15);
        let mut prev = at;
        for s in warm + 1..total {
            let lr = lr_at(s, total, warm, base).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn quadratic_drops_by_two_orders() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("xy", Tensor::new([1, 1, 1, 2], vec![1.5, -2.0]).unwrap(), ParamKind::Weight);
        let curv = [1.0, 10.0];
        let loss = |s: &ParamStore<f64>| {
            let v = s.value(id).data();
            0.5 * (curv[0] * v[0] * v[0] + curv[1] * v[1] * v[1])
        };
        let start = loss(&s);
        let mut opt = AdamW::new(AdamWConfig::default());
        for step in 0..200 {
            s.zero_grad();
            let v = s.value(id).data().to_vec();
            s.accumulate_grad(id, &[curv[0] * v[0], curv[1] * v[1]]);
            opt.step(&mut s, lr_at(step, 200, 10, 0.1).unwrap()).unwrap();
        }
        assert!(loss(&s) * 100.0 <= start, "{} -> {}", start, loss(&s));
    }
}
