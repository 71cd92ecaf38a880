use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

use super::{sgd_step, Param, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn build<T: Scalar>(self, params: &[&Param<T>]) -> Optimizer {
        match self {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(params)),
        }
    }
}

/// Update rule state for one training run.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam(Adam),
}

impl Optimizer {
    pub fn step<T: Scalar>(&mut self, params: &mut [&mut Param<T>], lr: f64) -> Result<()> {
        match self {
            Optimizer::Sgd => sgd_step(params, lr),
            Optimizer::Adam(a) => a.step(params, lr),
        }
    }
}

/// Adam with bias correction; moments are kept in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    steps: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Scalar>(params: &[&Param<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.data.len()]).collect();
        Adam { beta1: 0.9, beta2: 0.999, epsilon: 1e-8, steps: 0, m: zeros(), v: zeros() }
    }

    pub fn step<T: Scalar>(&mut self, params: &mut [&mut Param<T>], lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return domain(format!("learning rate {lr} must be finite and non-negative"));
        }
        if params.len() != self.m.len() || params.iter().zip(&self.m).any(|(p, m)| p.value.data.len() != m.len()) {
            return domain("parameters do not match the optimizer state");
        }
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for (((x, g), m), v) in p.value.data.iter_mut().zip(&p.grad.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.as_f64();
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *x -= T::of(lr * (*m / c1) / ((*v / c2).sqrt() + self.epsilon));
            }
        }
        Ok(())
    }
}
