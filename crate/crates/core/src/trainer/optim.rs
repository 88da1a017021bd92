use std::collections::BTreeMap;

use crate::engine::{ParamStore, Tensor};
use crate::error::{Error, Result};

use super::config::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates and step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: AdamState::default(),
        }
    }

    /// One bias-corrected update of every trainable parameter that has a
    /// gradient. All gradients are checked before anything is written.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::contract(format!("gradient for unknown parameter `{name}`")))?;
            if p.tensor.shape() != g.shape() {
                return Err(Error::dimension(format!(
                    "gradient of `{name}` is {} but the parameter is {}",
                    g.shape(),
                    p.tensor.shape()
                )));
            }
            if let Some(i) = g.nan_scan() {
                return Err(Error::NonFinite {
                    origin: format!("gradient of `{name}` (element {i})"),
                });
            }
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.state.step += 1;
        let t = self.state.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, g) in grads {
            if params.get(name).is_some_and(|p| p.frozen) {
                continue;
            }
            let zeros = || Tensor::zeros(g.shape());
            let m = self.state.m.entry(name.clone()).or_insert_with(zeros);
            let v = self.state.v.entry(name.clone()).or_insert_with(zeros);
            let p = params.tensor_mut(name)?;
            let it = p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data());
            for (((p, m), v), &g) in it {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Learning rate for 1-based `iteration`: the initial rate halved once for
/// every halving point already reached.
pub fn lr_at(iteration: u64, config: &TrainConfig) -> f64 {
    let passed = config
        .halving_iterations()
        .iter()
        .filter(|&&p| iteration >= p)
        .count();
    config.lr_initial * 0.5f64.powi(passed as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::Shape;

    fn single(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(v));
        s
    }

    fn grad(v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("w".to_owned(), Tensor::scalar(v))])
    }

    #[test]
    fn first_step_is_lr_sized() {
        for g in [3.0, -0.02, 1e-3, 250.0] {
            let mut s = single(1.0);
            let mut opt = Adam::new(AdamConfig::default());
            opt.step(&mut s, &grad(g), 1e-3).unwrap();
            let dp = s.tensor("w").unwrap().item().unwrap() - 1.0;
            assert!((dp.abs() - 1e-3).abs() < 1e-6, "{g}: {dp}");
            assert_eq!(dp.signum(), -g.signum());
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = single(0.25);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut s, &grad(0.0), 1e-3).unwrap();
        assert_eq!(s.tensor("w").unwrap().item().unwrap(), 0.25);
    }

    #[test]
    fn matches_reference_for_two_steps() {
        let (b1, b2, eps, lr, g) = (0.9f64, 0.999f64, 1e-8, 5e-5, 0.37);
        // hand-rolled reference
        let (mut p, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            p -= lr * mh / (vh.sqrt() + eps);
        }
        let mut s = single(0.5);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut s, &grad(g), lr).unwrap();
        opt.step(&mut s, &grad(g), lr).unwrap();
        assert!((s.tensor("w").unwrap().item().unwrap() - p).abs() < 1e-12);
        assert_eq!(opt.state.step, 2);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut s = single(0.5);
        s.insert("other", Tensor::zeros(Shape::new(1, 1, 1, 2)));
        let mut g = grad(f64::NAN);
        g.insert("other".into(), Tensor::full(Shape::new(1, 1, 1, 2), 1.0));
        let mut opt = Adam::new(AdamConfig::default());
        let err = opt.step(&mut s, &g, 1e-3).unwrap_err();
        assert!(err.is_numerical());
        assert!(err.to_string().contains("`w`"));
        assert_eq!(s.tensor("other").unwrap().data(), &[0.0, 0.0]);
        assert_eq!(opt.state.step, 0);
    }

    #[test]
    fn schedule() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(1, &c), 5e-5);
        assert_eq!(lr_at(14_399_999, &c), 5e-5);
        assert_eq!(lr_at(14_400_000, &c), 2.5e-5);
        assert_eq!(lr_at(19_200_000, &c), 1.25e-5);
        assert_eq!(lr_at(24_000_000, &c), 6.25e-6);
        let mut drops = 0;
        let mut last = lr_at(1, &c);
        for it in (1..=24_000_000).step_by(400_000).chain([24_000_000]) {
            let lr = lr_at(it, &c);
            assert!(lr <= last);
            if lr < last {
                drops += 1;
            }
            last = lr;
        }
        assert_eq!(drops, 3);
    }
}
