//! First-order optimizers over flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::adcore::{Checkpoint, Entry};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Ascent,
    Descent,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

fn default_adagrad_eps() -> f64 {
    1e-6
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    Adagrad {
        lr: f64,
        #[serde(default = "default_adagrad_eps")]
        eps: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam { lr, beta1: default_beta1(), beta2: default_beta2(), eps: default_eps() }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::Adagrad { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.lr();
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        match *self {
            OptimizerConfig::Sgd { .. } => {}
            OptimizerConfig::Adagrad { eps, .. } => {
                if !(eps > 0.0) {
                    return Err(Error::Config("adagrad eps must be positive".into()));
                }
            }
            OptimizerConfig::Adam { beta1, beta2, eps, .. } => {
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                    return Err(Error::Config("adam needs betas in [0, 1) and positive eps".into()));
                }
            }
        }
        Ok(())
    }
}

/// Optimizer state for one parameter vector.
///
/// For AdaGrad `v` holds the running sum of squared gradients; for Adam `m`
/// and `v` are the biased moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    config: OptimizerConfig,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, num_params: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, lr: config.lr(), m: vec![0.0; num_params], v: vec![0.0; num_params], t: 0 })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Changes the learning rate, keeping moment estimates and step count.
    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::contract(format!("learning rate must be positive, got {lr}")));
        }
        self.lr = lr;
        Ok(())
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    /// Applies one update in place and returns the norm of the change.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], direction: Direction) -> Result<f64> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::dim(format!(
                "optimizer holds {} parameters, got params {} and grad {}",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("optimizer gradient".into()));
        }
        let sign = match direction {
            Direction::Ascent => 1.0,
            Direction::Descent => -1.0,
        };
        self.t += 1;
        let lr = self.lr;
        let mut sq = 0.0;
        match self.config {
            OptimizerConfig::Sgd { .. } => {
                for (p, g) in params.iter_mut().zip(grad) {
                    let d = sign * lr * g;
                    *p += d;
                    sq += d * d;
                }
            }
            OptimizerConfig::Adagrad { eps, .. } => {
                for ((p, g), v) in params.iter_mut().zip(grad).zip(self.v.iter_mut()) {
                    *v += g * g;
                    let d = sign * lr * g / (v.sqrt() + eps);
                    *p += d;
                    sq += d * d;
                }
            }
            OptimizerConfig::Adam { beta1, beta2, eps, .. } => {
                let c1 = 1.0 - beta1.powf(self.t as f64);
                let c2 = 1.0 - beta2.powf(self.t as f64);
                for (((p, g), m), v) in params.iter_mut().zip(grad).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let d = sign * lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    *p += d;
                    sq += d * d;
                }
            }
        }
        Ok(sq.sqrt())
    }

    /// Stores the mutable state under `prefix.*`.
    pub fn save_into(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.insert(format!("{prefix}.lr"), Entry::Vector(vec![self.lr]))
            .insert(format!("{prefix}.m"), Entry::Vector(self.m.clone()))
            .insert(format!("{prefix}.v"), Entry::Vector(self.v.clone()))
            .insert(format!("{prefix}.t"), Entry::Integer(self.t));
    }

    /// Restores state written by [`Optimizer::save_into`].
    pub fn restore_from(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        let m = ck.vector(&format!("{prefix}.m"))?;
        let v = ck.vector(&format!("{prefix}.v"))?;
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::dim("optimizer state size does not match"));
        }
        let lr = ck.vector(&format!("{prefix}.lr"))?;
        self.set_lr(*lr.first().ok_or_else(|| Error::contract("empty learning rate entry"))?)?;
        self.m.copy_from_slice(m);
        self.v.copy_from_slice(v);
        self.t = ck.integer(&format!("{prefix}.t"))?;
        Ok(())
    }
}
