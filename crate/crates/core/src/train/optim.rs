//! Adaptive-moment optimizer with per-group learning-rate multipliers.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParameterStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub base_lr: f64,
    /// Groups missing from the map train at `base_lr`.
    pub lr_mult: BTreeMap<ParamGroup, f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, scaled by each parameter's learning rate.
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Random rotations and flips on training batches.
    pub augment: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            lr_mult: BTreeMap::from([(ParamGroup::Kan, 0.1)]),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            epochs: 100,
            batch_size: 8,
            seed: 0,
            augment: true,
        }
    }
}

impl OptimConfig {
    pub fn multiplier(&self, group: ParamGroup) -> f64 {
        self.lr_mult.get(&group).copied().unwrap_or(1.0)
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        self.base_lr * self.multiplier(group)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        // 0 is allowed: it freezes a group
        if let Some((g, m)) = self.lr_mult.iter().find(|(_, m)| !(**m >= 0.0 && m.is_finite())) {
            return bad(format!("lr_mult.{g} must be non-negative, got {m}"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        Ok(())
    }
}

/// One Adam update of `theta` in place. `t` is the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    cfg: &OptimConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powf(t as f64);
    let bc2 = 1.0 - cfg.beta2.powf(t as f64);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let step = (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
        theta[i] -= lr * (step + cfg.weight_decay * theta[i]);
    }
}

/// Moment estimates aligned with a [`ParameterStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParameterStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn first_moment(&self, i: usize) -> &Tensor {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor {
        &self.v[i]
    }

    /// Applies one update. Every registered parameter needs a gradient of
    /// its own shape; nothing is modified otherwise.
    pub fn step(&mut self, params: &mut ParameterStore, grads: &[Option<Tensor>], cfg: &OptimConfig) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Autodiff(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            match g {
                None => return Err(Error::Autodiff(format!("no gradient for parameter {}", p.name))),
                Some(g) if g.shape() != p.value.shape() => {
                    return Err(Error::Autodiff(format!(
                        "gradient for {} has shape {:?}, expected {:?}",
                        p.name,
                        g.shape(),
                        p.value.shape()
                    )))
                }
                _ => {}
            }
        }
        self.step += 1;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let g = g.as_ref().expect("checked above");
            let lr = cfg.lr(p.group);
            adam_update(
                p.value.data_mut(),
                g.data(),
                self.m[i].data_mut(),
                self.v[i].data_mut(),
                self.step,
                lr,
                cfg,
            );
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar Adam written out independently of [`adam_update`].
    fn oracle_run(theta0: f64, lr: f64, steps: usize) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut th, mut m, mut v) = (theta0, 0.0, 0.0);
        let mut out = vec![th];
        for t in 1..=steps {
            let g = 2.0 * th;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            th -= lr * mh / (vh.sqrt() + eps);
            out.push(th);
        }
        out
    }

    fn run(theta0: f64, lr: f64, steps: usize) -> Vec<f64> {
        let cfg = OptimConfig::default();
        let (mut th, mut m, mut v) = ([theta0], [0.0], [0.0]);
        let mut out = vec![theta0];
        for t in 1..=steps {
            let g = [2.0 * th[0]];
            adam_update(&mut th, &g, &mut m, &mut v, t as u64, lr, &cfg);
            out.push(th[0]);
        }
        out
    }

    #[test]
    fn quadratic_matches_oracle_and_converges() {
        let ours = run(1.0, 0.1, 200);
        let oracle = oracle_run(1.0, 0.1, 200);
        for (a, b) in ours.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(ours.last().unwrap().abs() < 1e-2);
        // monotone while approaching the minimum from one side
        let first_cross = ours.iter().position(|t| *t <= 0.0).unwrap_or(ours.len());
        assert!(ours[..first_cross].windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn smaller_multiplier_moves_slower_every_step() {
        let fast = run(1.0, 0.01, 50);
        let slow = run(1.0, 0.01 * 0.1, 50);
        for t in 1..=50 {
            assert!(slow[t] > fast[t], "step {t}");
        }
    }

    fn store() -> ParameterStore {
        let mut p = ParameterStore::new();
        p.register("a", ParamGroup::Conv, Tensor::new(&[2], vec![1.0, -2.0]).unwrap()).unwrap();
        p.register("k", ParamGroup::Kan, Tensor::scalar(0.5)).unwrap();
        p
    }

    #[test]
    fn zero_gradients_change_nothing_but_the_step() {
        let mut p = store();
        let before = p.clone();
        let mut adam = Adam::new(&p);
        let grads = vec![Some(Tensor::zeros(&[2])), Some(Tensor::scalar(0.0))];
        adam.step(&mut p, &grads, &OptimConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.step, 1);
        assert_eq!(adam.first_moment(0), &Tensor::zeros(&[2]));
        assert_eq!(adam.second_moment(1), &Tensor::scalar(0.0));
    }

    #[test]
    fn group_multiplier_scales_first_step() {
        let mut p = store();
        let mut adam = Adam::new(&p);
        let grads = vec![Some(Tensor::new(&[2], vec![3.0, -1.0]).unwrap()), Some(Tensor::scalar(2.0))];
        let cfg = OptimConfig::default();
        adam.step(&mut p, &grads, &cfg).unwrap();
        // the first bias-corrected step is lr * sign(g), up to eps
        let a = p.by_name("a").unwrap().value.data().to_vec();
        assert!((a[0] - (1.0 - 1e-3)).abs() < 1e-10);
        assert!((a[1] - (-2.0 + 1e-3)).abs() < 1e-10);
        let k = p.by_name("k").unwrap().value.item();
        assert!((k - (0.5 - 1e-4)).abs() < 1e-10);
    }

    #[test]
    fn missing_gradient_is_an_error_and_leaves_params() {
        let mut p = store();
        let before = p.clone();
        let mut adam = Adam::new(&p);
        let err = adam.step(&mut p, &[Some(Tensor::zeros(&[2])), None], &OptimConfig::default());
        assert!(matches!(err, Err(Error::Autodiff(m)) if m.contains("k")));
        assert_eq!(p, before);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn zero_multiplier_freezes_group() {
        let mut p = store();
        let mut adam = Adam::new(&p);
        let mut cfg = OptimConfig::default();
        cfg.lr_mult.insert(ParamGroup::Kan, 0.0);
        let grads = vec![Some(Tensor::ones(&[2])), Some(Tensor::scalar(5.0))];
        for _ in 0..10 {
            adam.step(&mut p, &grads, &cfg).unwrap();
        }
        assert_eq!(p.by_name("k").unwrap().value.item(), 0.5);
        assert!(p.by_name("a").unwrap().value.data()[0] < 1.0);
    }

    #[test]
    fn validation() {
        assert!(OptimConfig::default().validate().is_ok());
        let mut c = OptimConfig::default();
        c.lr_mult.insert(ParamGroup::Pagf, -1.0);
        assert!(c.validate().is_err());
        let c = OptimConfig { base_lr: 0.0, ..OptimConfig::default() };
        assert!(c.validate().is_err());
        let c = OptimConfig { batch_size: 0, ..OptimConfig::default() };
        assert!(c.validate().is_err());
    }
}
