//! Factored discrete action space and its mapping onto ECN thresholds.

use serde::{Deserialize, Serialize};

use crate::queue::EcnConfig;
use crate::units::KB;

/// Largest exponent in the threshold grid `alpha * 2^n KB`.
pub const N_MAX: u8 = 9;
/// Logit counts for the three heads: exponent of K_min, exponent gap to
/// K_max, and marking probability in 5% steps.
pub const HEAD_SIZES: [usize; 3] = [10, 9, 20];
pub const ACTION_LOGITS: usize = 10 + 9 + 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionIndex {
    n_min: u8,
    gap: u8,
    p_idx: u8,
}

impl ActionIndex {
    /// `gap` is the exponent difference between K_max and K_min, `1..=9-n_min`.
    pub fn new(n_min: u8, gap: u8, p_idx: u8) -> Option<Self> {
        (n_min <= N_MAX && gap >= 1 && gap <= N_MAX - n_min && p_idx < 20)
            .then_some(ActionIndex { n_min, gap, p_idx })
    }

    pub fn n_min(&self) -> u8 {
        self.n_min
    }

    pub fn gap(&self) -> u8 {
        self.gap
    }

    pub fn p_idx(&self) -> u8 {
        self.p_idx
    }

    /// Head indices `(n_min, gap - 1, p_idx)`.
    pub fn head_indices(&self) -> [usize; 3] {
        [self.n_min as usize, self.gap as usize - 1, self.p_idx as usize]
    }

    pub fn from_head_indices(idx: [usize; 3]) -> Option<Self> {
        Self::new(idx[0] as u8, idx[1] as u8 + 1, idx[2] as u8)
    }

    pub fn p_max(&self) -> f64 {
        0.05 * (self.p_idx as f64 + 1.0)
    }

    /// Every constructible action.
    pub fn all() -> impl Iterator<Item = ActionIndex> {
        (0..=N_MAX).flat_map(|n| {
            (1..=N_MAX - n).flat_map(move |g| (0..20).map(move |p| ActionIndex::new(n, g, p).unwrap()))
        })
    }
}

pub fn n_min_legal(idx: usize) -> bool {
    idx < N_MAX as usize
}

pub fn gap_legal(n_min: usize, gap_idx: usize) -> bool {
    gap_idx + 1 + n_min <= N_MAX as usize
}

/// E(n) = alpha * 2^n KB.
pub fn threshold_bytes(alpha_kb: u64, n: u8) -> u64 {
    (alpha_kb * KB) << n
}

pub fn action_to_ecn(a: ActionIndex, alpha_kb: u64) -> EcnConfig {
    EcnConfig {
        k_min: threshold_bytes(alpha_kb, a.n_min),
        k_max: threshold_bytes(alpha_kb, a.n_min + a.gap),
        p_max: a.p_max(),
    }
}

/// Exploration probability after `t` updates: `eps0` up to `decay_step`,
/// then `decay_rate^(t / decay_step) * eps0`.
pub fn exploration_epsilon(t: u64, eps0: f64, decay_rate: f64, decay_step: u64) -> f64 {
    if t <= decay_step {
        eps0
    } else {
        decay_rate.powf(t as f64 / decay_step as f64) * eps0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_values() {
        let a = ActionIndex::new(0, 1, 0).unwrap();
        assert_eq!(action_to_ecn(a, 20).k_min, 20 * KB);
        let b = ActionIndex::new(2, 3, 19).unwrap();
        let cfg = action_to_ecn(b, 20);
        assert_eq!((cfg.k_min, cfg.k_max), (80 * KB, 640 * KB));
        assert_eq!(cfg.p_max, 0.05 * 20.0);
    }

    #[test]
    fn top_exponent_has_no_gap() {
        assert!(ActionIndex::new(9, 1, 0).is_none());
        assert!(ActionIndex::new(8, 1, 0).is_some());
        assert!(ActionIndex::new(8, 2, 0).is_none());
        assert!(ActionIndex::new(0, 0, 0).is_none());
        assert!(ActionIndex::new(0, 1, 20).is_none());
    }

    #[test]
    fn every_action_has_ordered_thresholds() {
        let mut count = 0;
        for a in ActionIndex::all() {
            let cfg = action_to_ecn(a, 20);
            assert!(cfg.k_min < cfg.k_max);
            cfg.validate().unwrap();
            count += 1;
        }
        // sum over n of (9 - n) gap choices, times 20 probabilities
        assert_eq!(count, 45 * 20);
    }

    #[test]
    fn epsilon_schedule() {
        assert_eq!(exploration_epsilon(10, 0.2, 0.99, 50), 0.2);
        assert_eq!(exploration_epsilon(50, 0.2, 0.99, 50), 0.2);
        assert!((exploration_epsilon(100, 0.2, 0.99, 50) - 0.19602).abs() < 1e-12);
    }
}
