//! Learning-rate schedule: linear warmup into cosine decay, with one peak
//! rate per parameter group (radiograph group vs text group).

use crate::error::{Error, Result};

pub const GROUP_RADIOGRAPH: usize = 0;
pub const GROUP_TEXT: usize = 1;

#[derive(Debug, Clone)]
pub struct Schedule {
    pub peak_lrs: Vec<f64>,
    pub warmup_iters: usize,
    pub total_iters: usize,
}

impl Schedule {
    pub fn new(peak_lrs: Vec<f64>, warmup_iters: usize, total_iters: usize) -> Result<Schedule> {
        if warmup_iters >= total_iters {
            return Err(Error::Config(format!(
                "warmup {warmup_iters} must be below total {total_iters}"
            )));
        }
        if peak_lrs.iter().any(|&lr| lr < 0.0) {
            return Err(Error::Config("peak learning rates must be non-negative".into()));
        }
        Ok(Schedule { peak_lrs, warmup_iters, total_iters })
    }

    /// `iter < warmup`: linear ramp `peak·iter/warmup`; afterwards cosine
    /// decay `peak·½(1+cos(π·(iter−warmup)/(total−warmup)))`. Both branches
    /// give exactly `peak` at `iter == warmup`.
    pub fn lr_at(&self, iter: usize, group: usize) -> Result<f64> {
        let peak = *self.peak_lrs.get(group).ok_or_else(|| {
            Error::Contract(format!("unknown parameter group {group}"))
        })?;
        if iter > self.total_iters {
            return Err(Error::Contract(format!(
                "iteration {iter} beyond schedule end {}",
                self.total_iters
            )));
        }
        if iter < self.warmup_iters {
            Ok(peak * iter as f64 / self.warmup_iters as f64)
        } else {
            let progress =
                (iter - self.warmup_iters) as f64 / (self.total_iters - self.warmup_iters) as f64;
            Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
        }
    }
}
