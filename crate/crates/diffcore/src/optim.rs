use crate::array::Array;
use crate::error::{DiffError, Result};
use crate::params::ParamStore;
use crate::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Method {
    /// Plain gradient descent.
    Sgd,
    /// Adaptive moments with bias correction.
    Adam { beta1: Real, beta2: Real, eps: Real },
}

impl Method {
    pub fn adam() -> Self {
        Method::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: Real,
    pub method: Method,
}

/// Applies parameter updates from accumulated gradients, then clears them.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    first: Vec<Array>,
    second: Vec<Array>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn sgd(learning_rate: Real) -> Self {
        Self::new(OptimizerConfig {
            learning_rate,
            method: Method::Sgd,
        })
    }

    pub fn adam(learning_rate: Real) -> Self {
        Self::new(OptimizerConfig {
            learning_rate,
            method: Method::adam(),
        })
    }

    pub fn config(&self) -> OptimizerConfig {
        self.config
    }

    pub fn set_learning_rate(&mut self, lr: Real) {
        self.config.learning_rate = lr;
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates every parameter in place. Fails without touching anything if
    /// any parameter lacks a gradient.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if let Some((_, p)) = params.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(DiffError::MissingGradient(p.name.clone()));
        }
        self.step += 1;
        let lr = self.config.learning_rate;
        match self.config.method {
            Method::Sgd => {
                for id in params.ids().collect::<Vec<_>>() {
                    let p = params.param_mut(id);
                    let g = p.grad.take().expect("checked above");
                    for (v, g) in p.value.data_mut().iter_mut().zip(g.data()) {
                        *v -= lr * g;
                    }
                }
            }
            Method::Adam { beta1, beta2, eps } => {
                if self.first.len() != params.len() {
                    self.first = params
                        .iter()
                        .map(|(_, p)| Array::zeros(p.value.shape().to_vec()))
                        .collect();
                    self.second = self.first.clone();
                }
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for id in params.ids().collect::<Vec<_>>() {
                    let p = params.param_mut(id);
                    let g = p.grad.take().expect("checked above");
                    let m = self.first[id.index()].data_mut();
                    let s = self.second[id.index()].data_mut();
                    for (((v, g), m), s) in p
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.iter_mut())
                        .zip(s.iter_mut())
                    {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *s = beta2 * *s + (1.0 - beta2) * g * g;
                        let mhat = *m / c1;
                        let shat = *s / c2;
                        *v -= lr * mhat / (shat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
