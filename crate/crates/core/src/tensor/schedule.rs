use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Linear warmup to `peak`, then linear decay to zero at `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            peak: 0.0002,
            warmup_steps: 4000,
            total_steps: 1_200_000,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak >= 0.0) || self.warmup_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::config(format!(
                "lr schedule needs peak >= 0 and 0 < warmup_steps < total_steps, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step <= self.warmup_steps {
            self.peak * step as f64 / self.warmup_steps as f64
        } else if step >= self.total_steps {
            0.0
        } else {
            let remaining = (self.total_steps - step) as f64;
            self.peak * remaining / (self.total_steps - self.warmup_steps) as f64
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            peak: self.peak * factor,
            ..*self
        }
    }
}
