use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::InvalidParameter(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay. Moments are kept in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    config: OptimizerConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: OptimizerConfig, params: &ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Ok(Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        })
    }

    /// Restores saved moments.
    pub fn from_state(config: OptimizerConfig, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::Format("optimizer moments disagree in shape".into()));
        }
        Ok(Self { config, step, m, v })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// One update of every parameter with its gradient (same order).
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (ib1, ib2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let decay = T::of(1.0 - c.lr * c.weight_decay);
        let step = T::of(c.lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(c.eps);
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape("adamw", format!("param {:?} grad {:?}", p.shape(), g.shape())));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + ib1 * g;
                *v = b2 * *v + ib2 * g * g;
                *p = *p * decay - step * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let cfg = OptimizerConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let mut opt = AdamW::new(cfg, &store).unwrap();
        let g = Tensor::new(vec![3], vec![4.0, -0.01, 0.0]).unwrap();
        opt.update(&mut store, &[g]).unwrap();
        let w = store.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 1.9).abs() < 1e-4);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::scalar(2.0)).unwrap();
        let cfg = OptimizerConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..OptimizerConfig::default()
        };
        let mut opt = AdamW::new(cfg, &store).unwrap();
        opt.update(&mut store, &[Tensor::scalar(0.0)]).unwrap();
        assert!((store.get("w").unwrap().item() - 2.0 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn minimises_quadratic() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::new(vec![2], vec![3.0, -4.0]).unwrap()).unwrap();
        let cfg = OptimizerConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let mut opt = AdamW::new(cfg, &store).unwrap();
        for _ in 0..2000 {
            let w = store.get("w").unwrap().clone();
            let g = Tensor::new(vec![2], w.data().iter().map(|v| 2.0 * v).collect()).unwrap();
            opt.update(&mut store, &[g]).unwrap();
        }
        assert!(store.get("w").unwrap().data().iter().all(|v| v.abs() < 1e-2));
    }
}
