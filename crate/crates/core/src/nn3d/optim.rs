//! Adam / Nadam updates and a reduce-on-plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::{NnError, Param, Real, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Nadam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Update every trainable parameter from its accumulated gradient.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step<T: Real>(&self, params: &mut [&mut Param<T>]) -> Result<()> {
        for p in params.iter().filter(|p| p.trainable) {
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(NnError::NonFiniteGrad(p.name.clone()));
            }
        }
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        let one = T::one();
        for p in params.iter_mut().filter(|p| p.trainable) {
            p.adam.step += 1;
            let t = p.adam.step as i32;
            let bc1 = one - b1.powi(t);
            let bc2 = one - b2.powi(t);
            let Param { value, grad, adam, .. } = &mut **p;
            for (((x, &g), m), v) in value.iter_mut().zip(grad.iter()).zip(adam.m.iter_mut()).zip(adam.v.iter_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                let num = match self.kind {
                    OptimizerKind::Adam => mhat,
                    OptimizerKind::Nadam => b1 * mhat + (one - b1) * g / bc1,
                };
                *x -= lr * num / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Serializable state of a [`PlateauScheduler`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub lr: f64,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

/// Multiplies the learning rate by `factor` once the monitored loss has
/// not improved by more than `min_delta` for `patience` epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub state: SchedulerState,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        PlateauScheduler {
            factor,
            patience,
            min_delta: 1e-6,
            state: SchedulerState {
                lr,
                best: None,
                bad_epochs: 0,
            },
        }
    }

    pub fn lr(&self) -> f64 {
        self.state.lr
    }

    /// Record one epoch's loss. Returns true when the rate was reduced.
    pub fn observe(&mut self, loss: f64) -> bool {
        let s = &mut self.state;
        match s.best {
            Some(b) if loss >= b - self.min_delta => {
                s.bad_epochs += 1;
                if s.bad_epochs >= self.patience {
                    s.lr *= self.factor;
                    s.bad_epochs = 0;
                    return true;
                }
            }
            _ => {
                s.best = Some(loss);
                s.bad_epochs = 0;
            }
        }
        false
    }
}
