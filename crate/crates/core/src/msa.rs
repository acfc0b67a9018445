//! Motion-aware annealed learning rate: grows linearly with the estimated
//! displacement magnitude and decays exponentially with the step index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsaConfig {
    pub l_min: f64,
    pub l_max: f64,
    pub gamma: f64,
    /// Largest displacement magnitude seen so far; raised online by [`MsaTracker`].
    pub t_max_mag: f64,
    pub decay_horizon: u32,
    /// When false the recovery driver uses its fixed base rate instead.
    pub enabled: bool,
}

impl Default for MsaConfig {
    fn default() -> Self {
        Self {
            l_min: 1e-4,
            l_max: 1e-2,
            gamma: 0.9,
            t_max_mag: 1e-6,
            decay_horizon: 200,
            enabled: true,
        }
    }
}

impl MsaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l_min > 0.0 && self.l_min <= self.l_max && self.l_max.is_finite()) {
            return Err(Error::invalid(format!(
                "msa rates need 0 < l_min <= l_max, got {} and {}",
                self.l_min, self.l_max
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::invalid(format!(
                "msa gamma must be in (0, 1), got {}",
                self.gamma
            )));
        }
        if !(self.t_max_mag > 0.0 && self.t_max_mag.is_finite()) {
            return Err(Error::invalid("msa t_max_mag must be > 0"));
        }
        if self.decay_horizon == 0 {
            return Err(Error::invalid("msa decay_horizon must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduledRate {
    pub rate: f64,
    /// The displacement exceeded `t_max_mag` and was clamped.
    pub clamped: bool,
}

pub fn learning_rate(t_mag: f64, n: u32, cfg: &MsaConfig) -> ScheduledRate {
    let clamped = t_mag > cfg.t_max_mag;
    let mag = t_mag.clamp(0.0, cfg.t_max_mag);
    let linear = (cfg.l_max - cfg.l_min) / cfg.t_max_mag * mag + cfg.l_min;
    let decay = cfg.gamma.powf(n as f64 / cfg.decay_horizon as f64);
    ScheduledRate {
        rate: linear * decay,
        clamped,
    }
}

/// Online maximum of displacement magnitudes, owned by the recovery driver.
#[derive(Debug, Clone)]
pub struct MsaTracker {
    cfg: MsaConfig,
    last: Option<f64>,
}

impl MsaTracker {
    pub fn new(cfg: MsaConfig) -> Self {
        Self { cfg, last: None }
    }

    pub fn observe(&mut self, t_mag: f64) {
        if t_mag.is_finite() {
            self.cfg.t_max_mag = self.cfg.t_max_mag.max(t_mag);
            self.last = Some(t_mag);
        }
    }

    pub fn t_max_mag(&self) -> f64 {
        self.cfg.t_max_mag
    }

    /// Rate for step `n` of the next exposure; `None` until a displacement
    /// has been observed.
    pub fn rate(&self, n: u32) -> Option<f64> {
        self.last.map(|mag| learning_rate(mag, n, &self.cfg).rate)
    }
}
