//! Reduce-on-plateau learning-rate schedule.

use crate::error::{CoreError, Result};

/// Halving-on-stagnation schedule. The rate only ever changes by whole
/// multiplications with `factor`, so it stays exactly `lr0 * factor^k`.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    lr: f64,
    best: f64,
    since: usize,
    factor: f64,
    patience: usize,
    min_delta: f64,
    min_lr: f64,
}

impl PlateauScheduler {
    pub fn new(
        lr0: f64,
        factor: f64,
        patience: usize,
        min_delta: f64,
        min_lr: f64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&factor) || factor == 0.0 {
            return Err(CoreError::invalid(
                "scheduler",
                format!("decay factor {factor} outside (0, 1)"),
            ));
        }
        if patience == 0 {
            return Err(CoreError::invalid("scheduler", "patience must be at least 1"));
        }
        if lr0 <= 0.0 {
            return Err(CoreError::invalid(
                "scheduler",
                format!("initial learning rate {lr0} must be positive"),
            ));
        }
        Ok(PlateauScheduler {
            lr: lr0,
            best: f64::INFINITY,
            since: 0,
            factor,
            patience,
            min_delta,
            min_lr,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one epoch loss. Returns true when the schedule wants training
    /// to stop: the loss has stagnated for a full patience window but the
    /// rate is already at its floor.
    pub fn step(&mut self, loss: f64) -> bool {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.since = 0;
            return false;
        }
        self.since += 1;
        if self.since < self.patience {
            return false;
        }
        self.since = 0;
        let next = self.lr * self.factor;
        if next < self.min_lr {
            return true;
        }
        self.lr = next;
        false
    }
}
