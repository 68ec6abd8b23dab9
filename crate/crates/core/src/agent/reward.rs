use serde::{Deserialize, Serialize};

use crate::error::{PetError, Result};

/// Throughput/delay weights; they must sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub beta1: f64,
    pub beta2: f64,
}

impl RewardSpec {
    pub fn new(beta1: f64, beta2: f64) -> Result<Self> {
        let r = RewardSpec { beta1, beta2 };
        r.validate()?;
        Ok(r)
    }

    /// Latency-leaning weights for web search traffic.
    pub fn web_search() -> Self {
        RewardSpec { beta1: 0.3, beta2: 0.7 }
    }

    /// Throughput-leaning weights for data mining traffic.
    pub fn data_mining() -> Self {
        RewardSpec { beta1: 0.7, beta2: 0.3 }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.beta1) || !unit(self.beta2) || (self.beta1 + self.beta2 - 1.0).abs() > 1e-12 {
            return Err(PetError::Config(format!(
                "reward weights ({}, {}) must lie in [0, 1] and sum to 1",
                self.beta1, self.beta2
            )));
        }
        Ok(())
    }
}

/// Port statistics over one tuning interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntervalStats {
    pub tx_rate_bps: f64,
    pub link_bw_bps: f64,
    /// Time-averaged queue length in MTU-sized packets.
    pub avg_qlen_packets: f64,
}

/// `beta1 * utilization + beta2 / max(1, avg queue in packets)`.
pub fn compute_reward(spec: &RewardSpec, stats: &IntervalStats) -> f64 {
    let utilization = (stats.tx_rate_bps / stats.link_bw_bps).clamp(0.0, 1.0);
    let inverse_queue = 1.0 / stats.avg_qlen_packets.max(1.0);
    spec.beta1 * utilization + spec.beta2 * inverse_queue
}
