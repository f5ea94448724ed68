//! First-order optimizers over a [`ParamSet`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub method: Method,
    pub learning_rate: f64,
    /// Momentum for SGD; ignored by Adam.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Learning-rate multipliers keyed by parameter-name prefix; the longest
    /// matching prefix wins.
    pub lr_scale: BTreeMap<String, f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            method: Method::Adam,
            learning_rate: 1e-3,
            momentum: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lr_scale: BTreeMap::new(),
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig {
            method: Method::Sgd,
            learning_rate,
            ..Default::default()
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig {
            learning_rate,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        for (name, v) in [("momentum", self.momentum), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if let Some((k, v)) = self.lr_scale.iter().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("lr_scale for {k:?} must be > 0, got {v}")));
        }
        Ok(())
    }

    /// Multiplier applied to the learning rate of parameter `name`.
    pub fn scale_for(&self, name: &str) -> f64 {
        self.lr_scale
            .iter()
            .filter(|(prefix, _)| name.starts_with(prefix.as_str()))
            .max_by_key(|(prefix, _)| prefix.len())
            .map_or(1.0, |(_, &v)| v)
    }
}

/// Optimizer state (moment buffers and step counter).
#[derive(Debug, Clone)]
pub struct Optimizer<T: Scalar = f32> {
    config: OptimizerConfig,
    step: u64,
    factor: f64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            step: 0,
            factor: 1.0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Scales every learning rate by `factor` from the next step on.
    pub fn set_lr_factor(&mut self, factor: f64) {
        self.factor = factor;
    }

    /// Applies one update from the accumulated gradients, then clears them.
    ///
    /// A non-finite gradient aborts the step before any value changes.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        if let Some(p) = params.iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {}", p.name)));
        }
        let cfg = self.config.clone();
        let factor = self.factor;
        let lr_of = |name: &str| T::from_f64(cfg.learning_rate * factor * cfg.scale_for(name));
        let needs_first = cfg.method == Method::Adam || cfg.momentum > 0.0;
        if needs_first && self.first.len() != params.len() {
            self.first = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        }
        if cfg.method == Method::Adam && self.second.len() != params.len() {
            self.second = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        }
        self.step += 1;
        match cfg.method {
            Method::Sgd => {
                let mu = T::from_f64(cfg.momentum);
                for (i, p) in params.iter_mut().enumerate() {
                    let lr = lr_of(&p.name);
                    let grad = p.grad.data();
                    if needs_first {
                        let vel = self.first[i].data_mut();
                        for ((v, &g), x) in vel.iter_mut().zip(grad).zip(p.value.data_mut()) {
                            *v = mu * *v + g;
                            *x -= lr * *v;
                        }
                    } else {
                        for (x, &g) in p.value.data_mut().iter_mut().zip(grad) {
                            *x -= lr * g;
                        }
                    }
                }
            }
            Method::Adam => {
                let (b1, b2) = (cfg.beta1, cfg.beta2);
                let t = self.step as i32;
                let c1 = T::from_f64(1.0 / (1.0 - b1.powi(t)));
                let c2 = T::from_f64(1.0 / (1.0 - b2.powi(t)));
                let (b1, b2) = (T::from_f64(b1), T::from_f64(b2));
                let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
                let eps = T::from_f64(cfg.epsilon);
                for (i, p) in params.iter_mut().enumerate() {
                    let lr = lr_of(&p.name);
                    let grad = p.grad.data();
                    let m = self.first[i].data_mut();
                    let v = self.second[i].data_mut();
                    for (((x, &g), m), v) in p.value.data_mut().iter_mut().zip(grad).zip(m).zip(v) {
                        *m = b1 * *m + one_b1 * g;
                        *v = b2 * *v + one_b2 * g * g;
                        let mh = *m * c1;
                        let vh = *v * c2;
                        *x -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        params.zero_grad();
        Ok(())
    }
}
