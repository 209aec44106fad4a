use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamSet, Scalar, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<F: Scalar> {
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    t: i32,
}

impl<F: Scalar> Adam<F> {
    pub fn new(params: &ParamSet<F>) -> Self {
        let zeros = || params.tensors().map(|t| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Applies one update; `grads[i]` must match parameter `i`.
    pub fn step(&mut self, params: &mut ParamSet<F>, grads: &[Tensor<F>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::shape(
                "adam",
                format!("{} gradients for {} parameters", grads.len(), self.m.len()),
            ));
        }
        self.t += 1;
        let (b1, b2) = (F::lit(ADAM_BETA1), F::lit(ADAM_BETA2));
        let c1 = F::one() - b1.powi(self.t);
        let c2 = F::one() - b2.powi(self.t);
        let (lr, eps) = (F::lit(lr), F::lit(ADAM_EPS));
        for (i, p) in params.tensors_mut().enumerate() {
            let g = grads[i].data();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                m[k] = b1 * m[k] + (F::one() - b1) * g[k];
                v[k] = b2 * v[k] + (F::one() - b2) * g[k] * g[k];
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<F: Scalar>(grads: &mut [Tensor<F>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&x| {
            let x: f64 = x.cast();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = F::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = *x * s);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    /// Multiplier in `(0, 1)` applied on a plateau.
    pub factor: f64,
    /// Consecutive epochs without improvement before decaying.
    pub patience: usize,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            factor: 0.5,
            patience: 1,
        }
    }
}

/// Decays the learning rate when the monitored metric stops increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauScheduler {
    lr: f64,
    config: SchedulerConfig,
    best: Option<f64>,
    bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(initial_lr: f64, config: SchedulerConfig) -> Result<Self> {
        if !(initial_lr >= 0.0) || !initial_lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {initial_lr}")));
        }
        if !(config.factor > 0.0 && config.factor < 1.0) {
            return Err(Error::Config(format!("scheduler factor must be in (0, 1), got {}", config.factor)));
        }
        if config.patience == 0 {
            return Err(Error::Config("scheduler patience must be >= 1".into()));
        }
        Ok(Self {
            lr: initial_lr,
            config,
            best: None,
            bad_epochs: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one epoch's metric and returns the learning rate for the next
    /// epoch. Any strict increase over the best value so far counts as an
    /// improvement.
    pub fn step(&mut self, metric: f64) -> Result<f64> {
        if !metric.is_finite() {
            return Err(Error::InvalidArgument(format!("scheduler metric {metric} is not finite")));
        }
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.config.patience {
                self.lr *= self.config.factor;
                self.bad_epochs = 0;
            }
        }
        Ok(self.lr)
    }
}

/// Free-function form of [`PlateauScheduler::step`].
pub fn step_scheduler(state: &mut PlateauScheduler, dev_metric: f64) -> Result<f64> {
    state.step(dev_metric)
}
