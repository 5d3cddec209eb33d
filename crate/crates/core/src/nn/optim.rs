// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{CktError, Result};
use crate::nn::params::{Grads, ParamStore};

/// Stochastic gradient descent with heavy-ball momentum:
/// `v <- momentum * v + g`, `p <- p - lr * v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
}

impl Default for Sgd {
    fn default() -> Self {
        Sgd { momentum: 0.9 }
    }
}

impl Sgd {
    pub fn step(&self, store: &mut ParamStore, grads: &Grads, lr: f64) -> Result<()> {
        if grads.0.len() != store.len() {
            return Err(CktError::Shape {
                op: "sgd_step",
                lhs: vec![store.len()],
                rhs: vec![grads.0.len()],
            });
        }
        if !grads.is_finite() {
            return Err(CktError::Numerical("non-finite gradient".into()));
        }
        let (values, momentum) = store.parts_mut();
        for ((p, v), g) in values.iter_mut().zip(momentum.iter_mut()).zip(&grads.0) {
            if p.shape != g.shape {
                return Err(CktError::Shape {
                    op: "sgd_step",
                    lhs: p.shape.clone(),
                    rhs: g.shape.clone(),
                });
            }
            for ((x, m), d) in p.data.iter_mut().zip(v.data.iter_mut()).zip(&g.data) {
                *m = self.momentum * *m + d;
                *x -= lr * *m;
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` once the observed loss has
/// gone `patience` consecutive epochs without a new minimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub best: Option<f64>,
    pub stale: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64) -> Self {
        PlateauSchedule {
            lr,
            factor: 0.1,
            patience: 20,
            best: None,
            stale: 0,
        }
    }

    /// Records one epoch's (smoothed) loss and returns the learning rate
    /// for the next epoch.
    pub fn observe(&mut self, loss: f64) -> f64 {
        match self.best {
            Some(b) if loss >= b => {
                self.stale += 1;
                if self.stale >= self.patience {
                    self.lr *= self.factor;
                    self.stale = 0;
                }
            }
            _ => {
                self.best = Some(loss);
                self.stale = 0;
            }
        }
        self.lr
    }
}
