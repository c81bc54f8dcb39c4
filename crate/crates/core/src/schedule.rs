//! Cosine annealing with warm restarts.

#[cfg(not(feature = "std"))]
use num_traits::Float as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr_init: f64,
    /// First cycle length in epochs.
    pub t0_epochs: f64,
    pub t_mult: f64,
    pub eta_min: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            lr_init: 0.04,
            t0_epochs: 10.0,
            t_mult: 2.0,
            eta_min: 0.0,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr_init >= 0.0
            && self.t0_epochs > 0.0
            && self.t_mult >= 1.0
            && self.eta_min >= 0.0
            && self.eta_min <= self.lr_init
            && [self.lr_init, self.t0_epochs, self.t_mult, self.eta_min]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(alloc::format!(
                "invalid scheduler settings {self:?}"
            )))
        }
    }

    /// Learning rate at optimizer step `step` (0-based) when an epoch has
    /// `steps_per_epoch` steps.
    pub fn lr_at(&self, step: usize, steps_per_epoch: usize) -> f64 {
        let mut t = step as f64;
        let mut len = self.t0_epochs * steps_per_epoch.max(1) as f64;
        // cycles are few (geometric growth), a linear walk is fine
        while t >= len {
            t -= len;
            len *= self.t_mult;
        }
        self.eta_min
            + 0.5 * (self.lr_init - self.eta_min) * (1.0 + (core::f64::consts::PI * t / len).cos())
    }
}
