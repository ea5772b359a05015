//! AdamW with decoupled weight decay, and the cosine-annealed learning rate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SaeError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr_max: 1e-4,
            lr_min: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            batch_size: 32,
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

impl Moments {
    pub fn zeros_like(t: &Tensor) -> Self {
        Moments { m: Tensor::zeros(t.shape()), v: Tensor::zeros(t.shape()) }
    }
}

/// One AdamW update of a single parameter. `step` is the 1-based count of
/// updates including this one (used for bias correction).
pub fn adamw_step(
    param: &mut Tensor,
    grad: &Tensor,
    moments: &mut Moments,
    step: u64,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(SaeError::Range(format!("learning rate must be >= 0, got {lr}")));
    }
    if step == 0 {
        return Err(SaeError::Usage("adamw step counter starts at 1".into()));
    }
    param.expect_same_shape(grad, "adamw_step")?;
    param.expect_same_shape(&moments.m, "adamw_step")?;
    grad.check_finite("adamw gradient")?;
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    let decay = 1.0 - lr * cfg.weight_decay;
    let (m, v) = (moments.m.data_mut(), moments.v.data_mut());
    for (i, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
        *p *= decay;
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Optimizer state over a whole [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config, step: 0, moments: BTreeMap::new() }
    }

    /// Updates every trainable parameter that has a gradient. Frozen entries
    /// are never touched, even if a gradient is supplied for them.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            g.check_finite(&format!("gradient of `{name}`"))?;
        }
        self.step += 1;
        for (name, g) in grads {
            if !store.is_trainable(name) {
                continue;
            }
            let p = store.get_mut(name)?;
            let mom = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| Moments::zeros_like(p));
            adamw_step(p, g, mom, self.step, lr, &self.config)?;
        }
        Ok(())
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·t_cur/total))`, stepped per epoch.
pub fn cosine_lr(t_cur: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total == 0 {
        return Err(SaeError::Range("cosine schedule needs at least one epoch".into()));
    }
    if t_cur > total {
        return Err(SaeError::Range(format!("epoch {t_cur} beyond schedule length {total}")));
    }
    let frac = t_cur as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> AdamWConfig {
        AdamWConfig::default()
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let orig = p.clone();
        let mut mom = Moments::zeros_like(&p);
        let lr = 1e-3;
        adamw_step(&mut p, &Tensor::zeros(&[3]), &mut mom, 1, lr, &cfg()).unwrap();
        for (a, b) in p.data().iter().zip(orig.data()) {
            assert_eq!(*a, b * (1.0 - lr * 0.05));
        }
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let no_decay = AdamWConfig { weight_decay: 0.0, ..cfg() };
        for g in [3.0, -0.5, 1.0] {
            let mut p = Tensor::scalar(0.7);
            let mut mom = Moments::zeros_like(&p);
            let lr = 1e-2;
            adamw_step(&mut p, &Tensor::scalar(g), &mut mom, 1, lr, &no_decay).unwrap();
            let inc = p.data()[0] - 0.7;
            assert!((inc + lr * f64::signum(g)).abs() < 1e-9, "g={g} inc={inc}");
        }
    }

    #[test]
    fn defaults_follow_training_setup() {
        let c = cfg();
        assert_eq!((c.beta1, c.beta2), (0.9, 0.999));
        assert_eq!(c.weight_decay, 0.05);
        assert_eq!(c.lr_max, 1e-4);
        assert_eq!(c.batch_size, 32);
    }

    #[test]
    fn zero_lr_zero_decay_is_identity() {
        let c = AdamWConfig { weight_decay: 0.0, ..cfg() };
        let mut p = Tensor::new(vec![2], vec![0.3, -1.2]).unwrap();
        let orig = p.clone();
        let mut mom = Moments::zeros_like(&p);
        adamw_step(&mut p, &Tensor::new(vec![2], vec![5.0, -1.0]).unwrap(), &mut mom, 1, 0.0, &c).unwrap();
        assert_eq!(p, orig);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut p = Tensor::scalar(1.0);
        let mut mom = Moments::zeros_like(&p);
        let bad = Tensor::from_raw(vec![1], vec![f64::NAN]);
        assert!(matches!(
            adamw_step(&mut p, &bad, &mut mom, 1, 1e-3, &cfg()),
            Err(SaeError::Numeric(_))
        ));
        assert!(adamw_step(&mut p, &Tensor::scalar(1.0), &mut mom, 1, -1.0, &cfg()).is_err());
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 10, 1e-4, 1e-6).unwrap(), 1e-4);
        assert!((cosine_lr(10, 10, 1e-4, 1e-6).unwrap() - 1e-6).abs() < 1e-18);
        assert!((cosine_lr(5, 10, 1e-4, 1e-6).unwrap() - (1e-4 + 1e-6) / 2.0).abs() < 1e-18);
        assert!(matches!(cosine_lr(11, 10, 1e-4, 0.0), Err(SaeError::Range(_))));
        assert!(cosine_lr(0, 0, 1e-4, 0.0).is_err());
    }

    #[test]
    fn frozen_params_untouched() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::scalar(1.0), true);
        store.insert("b", Tensor::scalar(1.0), false);
        let grads: BTreeMap<_, _> = [("a".to_string(), Tensor::scalar(1.0)), ("b".to_string(), Tensor::scalar(1.0))]
            .into_iter()
            .collect();
        let mut opt = AdamW::new(cfg());
        opt.step(&mut store, &grads, 1e-2).unwrap();
        assert_ne!(store.get("a").unwrap().data()[0], 1.0);
        assert_eq!(store.get("b").unwrap().data()[0], 1.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn cosine_is_non_increasing(total in 1usize..500, lo in 0.0f64..1e-3, span in 0.0f64..1e-2) {
                let hi = lo + span;
                let mut prev = f64::INFINITY;
                for t in 0..=total {
                    let lr = cosine_lr(t, total, hi, lo).unwrap();
                    prop_assert!(lr <= prev + 1e-18);
                    prev = lr;
                }
            }
        }
    }
}
