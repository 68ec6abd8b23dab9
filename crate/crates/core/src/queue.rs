//! Egress port queue with RED-style probabilistic ECN marking.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PetError, Result};
use crate::packet::Packet;
use crate::units::{SimTime, KB};

/// ECN marking parameters applied to one egress queue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcnConfig {
    /// Bytes at or below which nothing is marked.
    pub k_min: u64,
    /// Bytes at or above which everything is marked.
    pub k_max: u64,
    pub p_max: f64,
}

impl EcnConfig {
    pub fn new(k_min: u64, k_max: u64, p_max: f64) -> Result<Self> {
        let cfg = EcnConfig { k_min, k_max, p_max };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_kb(k_min_kb: u64, k_max_kb: u64, p_max: f64) -> Result<Self> {
        Self::new(k_min_kb * KB, k_max_kb * KB, p_max)
    }

    /// Static configuration used by DCQCN deployments (5 KB / 200 KB).
    pub fn secn1(p_max: f64) -> Self {
        EcnConfig {
            k_min: 5 * KB,
            k_max: 200 * KB,
            p_max,
        }
    }

    /// Static configuration used by HPCC deployments (100 KB / 400 KB).
    pub fn secn2(p_max: f64) -> Self {
        EcnConfig {
            k_min: 100 * KB,
            k_max: 400 * KB,
            p_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_min == 0 {
            return Err(PetError::InvalidEcn("k_min must be positive".into()));
        }
        if self.k_min >= self.k_max {
            return Err(PetError::InvalidEcn(format!(
                "k_min ({}) must be below k_max ({})",
                self.k_min, self.k_max
            )));
        }
        if !(self.p_max > 0.0 && self.p_max <= 1.0) {
            return Err(PetError::InvalidEcn(format!(
                "p_max {} outside (0, 1]",
                self.p_max
            )));
        }
        Ok(())
    }
}

/// RED interpolation: 0 up to `k_min`, linear to `p_max` below `k_max`, 1 from `k_max`.
pub fn mark_probability(qlen: u64, config: &EcnConfig) -> f64 {
    if qlen <= config.k_min {
        0.0
    } else if qlen >= config.k_max {
        1.0
    } else {
        config.p_max * (qlen - config.k_min) as f64 / (config.k_max - config.k_min) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnqueueOutcome {
    Accepted,
    AcceptedMarked,
    Dropped,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct QueueCounters {
    pub enqueued: u64,
    pub dequeued: u64,
    pub marked: u64,
    pub dropped: u64,
    pub tx_bytes: u64,
    pub tx_marked_bytes: u64,
    /// Configurations whose thresholds had to be clamped to the buffer.
    pub clamp_warnings: u64,
}

/// Single FIFO egress queue. Marking decisions use the queue length right
/// after the arriving packet has been admitted.
#[derive(Debug, Clone)]
pub struct PortQueue {
    packets: VecDeque<Packet>,
    qlen_bytes: u64,
    capacity: u64,
    config: EcnConfig,
    marking_enabled: bool,
    rng: ChaCha8Rng,
    counters: QueueCounters,
    // Time integral of qlen in byte-nanoseconds, for interval averages.
    qlen_integral: u128,
    last_change: SimTime,
}

impl PortQueue {
    pub fn new(capacity: u64, config: EcnConfig, seed: u64) -> Self {
        let mut q = PortQueue {
            packets: VecDeque::new(),
            qlen_bytes: 0,
            capacity,
            config,
            marking_enabled: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            counters: QueueCounters::default(),
            qlen_integral: 0,
            last_change: SimTime::ZERO,
        };
        q.config = q.clamp(config);
        q
    }

    /// A queue that never marks (used where no ECN policy is installed).
    pub fn without_marking(capacity: u64, seed: u64) -> Self {
        let mut q = Self::new(capacity, EcnConfig::secn2(1.0), seed);
        q.marking_enabled = false;
        q
    }

    pub fn qlen_bytes(&self) -> u64 {
        self.qlen_bytes
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }

    pub fn config(&self) -> &EcnConfig {
        &self.config
    }

    pub fn counters(&self) -> &QueueCounters {
        &self.counters
    }

    pub fn marking_enabled(&self) -> bool {
        self.marking_enabled
    }

    fn touch(&mut self, now: SimTime) {
        if now > self.last_change {
            self.qlen_integral += self.qlen_bytes as u128 * (now - self.last_change).as_ns() as u128;
            self.last_change = now;
        }
    }

    /// Byte-nanosecond integral of the queue length up to `now`.
    pub fn qlen_integral(&mut self, now: SimTime) -> u128 {
        self.touch(now);
        self.qlen_integral
    }

    pub fn enqueue(&mut self, mut pkt: Packet, now: SimTime) -> EnqueueOutcome {
        debug_assert!(pkt.size > 0);
        let size = pkt.size as u64;
        if self.qlen_bytes + size > self.capacity {
            self.counters.dropped += 1;
            return EnqueueOutcome::Dropped;
        }
        self.touch(now);
        self.qlen_bytes += size;
        let mut outcome = EnqueueOutcome::Accepted;
        if self.marking_enabled && pkt.ect {
            let p = mark_probability(self.qlen_bytes, &self.config);
            // Always draw so the marking stream does not depend on p.
            let u: f64 = self.rng.gen();
            if u < p {
                pkt.ce = true;
                self.counters.marked += 1;
                outcome = EnqueueOutcome::AcceptedMarked;
            }
        }
        self.counters.enqueued += 1;
        self.packets.push_back(pkt);
        outcome
    }

    pub fn dequeue(&mut self, now: SimTime) -> Option<Packet> {
        let pkt = self.packets.pop_front()?;
        self.touch(now);
        self.qlen_bytes -= pkt.size as u64;
        self.counters.dequeued += 1;
        self.counters.tx_bytes += pkt.size as u64;
        if pkt.ce {
            self.counters.tx_marked_bytes += pkt.size as u64;
        }
        Some(pkt)
    }

    /// Drops every queued packet, returning them.
    pub fn flush(&mut self, now: SimTime) -> Vec<Packet> {
        self.touch(now);
        let out: Vec<Packet> = self.packets.drain(..).collect();
        self.counters.dropped += out.len() as u64;
        self.qlen_bytes = 0;
        out
    }

    fn clamp(&mut self, mut config: EcnConfig) -> EcnConfig {
        if config.k_max > self.capacity {
            config.k_max = self.capacity;
            if config.k_min >= config.k_max {
                config.k_min = config.k_max.saturating_sub(1).max(1);
            }
            self.counters.clamp_warnings += 1;
        }
        config
    }

    /// Installs a new marking configuration for subsequent enqueues.
    ///
    /// `k_min >= k_max` is rejected; a `k_max` above the buffer is clamped to
    /// the buffer (and `k_min` kept below it) with a warning counted.
    pub fn apply_ecn_config(&mut self, config: EcnConfig, _now: SimTime) -> Result<()> {
        config.validate()?;
        self.config = self.clamp(config);
        self.marking_enabled = true;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Packet> {
        self.packets.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::packet::Packet;
    use proptest::prelude::*;

    fn pkt(size: u32) -> Packet {
        Packet::data(0, 0, 1, 0, size, 0)
    }

    #[test]
    fn interpolation_midpoint() {
        let cfg = EcnConfig::from_kb(100, 400, 0.2).unwrap();
        assert!((mark_probability(250 * KB, &cfg) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn secn1_boundary_is_unmarked() {
        let cfg = EcnConfig::secn1(0.2);
        assert_eq!(mark_probability(5 * KB, &cfg), 0.0);
        assert!(mark_probability(5 * KB + 1, &cfg) > 0.0);
    }

    #[test]
    fn saturates_above_k_max() {
        let cfg = EcnConfig::from_kb(100, 400, 0.2).unwrap();
        assert_eq!(mark_probability(401 * KB, &cfg), 1.0);
        assert_eq!(mark_probability(400 * KB, &cfg), 1.0);
    }

    #[test]
    fn overflow_drops() {
        let mut q = PortQueue::new(300 * KB, EcnConfig::secn1(0.2), 1);
        for _ in 0..295 {
            assert_ne!(q.enqueue(pkt(1024), SimTime(0)), EnqueueOutcome::Dropped);
        }
        assert_eq!(q.qlen_bytes(), 295 * KB);
        assert_eq!(q.enqueue(pkt(9 * 1024), SimTime(0)), EnqueueOutcome::Dropped);
        assert_eq!(q.counters().dropped, 1);
        assert_eq!(q.qlen_bytes(), 295 * KB);
    }

    #[test]
    fn empty_queue_accepts_unmarked() {
        let mut q = PortQueue::new(300 * KB, EcnConfig::secn1(1.0), 3);
        assert_eq!(q.enqueue(pkt(1000), SimTime(0)), EnqueueOutcome::Accepted);
    }

    #[test]
    fn full_buffer_marks_with_secn1() {
        let mut q = PortQueue::new(300 * KB, EcnConfig::secn1(0.2), 9);
        for _ in 0..299 {
            q.enqueue(pkt(1024), SimTime(0));
        }
        assert_eq!(q.enqueue(pkt(1024), SimTime(0)), EnqueueOutcome::AcceptedMarked);
        assert_eq!(q.qlen_bytes(), 300 * KB);
    }

    #[test]
    fn apply_config_changes_thresholds() {
        let mut q = PortQueue::new(300 * KB, EcnConfig::secn1(0.2), 1);
        let cfg = EcnConfig::from_kb(20, 160, 0.05).unwrap();
        q.apply_ecn_config(cfg, SimTime(0)).unwrap();
        assert_eq!(*q.config(), cfg);
        assert_eq!(q.counters().clamp_warnings, 0);
    }

    #[test]
    fn inverted_thresholds_rejected() {
        let mut q = PortQueue::new(300 * KB, EcnConfig::secn1(0.2), 1);
        let bad = EcnConfig {
            k_min: 200 * KB,
            k_max: 100 * KB,
            p_max: 0.2,
        };
        assert!(matches!(
            q.apply_ecn_config(bad, SimTime(0)),
            Err(PetError::InvalidEcn(_))
        ));
        assert!(EcnConfig::from_kb(200, 100, 0.2).is_err());
        assert_eq!(q.config().k_min, 5 * KB);
    }

    #[test]
    fn k_max_above_buffer_is_clamped() {
        let mut q = PortQueue::new(300 * KB, EcnConfig::secn1(0.2), 1);
        q.apply_ecn_config(EcnConfig::secn2(0.2), SimTime(0)).unwrap();
        assert_eq!(q.config().k_max, 300 * KB);
        assert_eq!(q.config().k_min, 100 * KB);
        assert_eq!(q.counters().clamp_warnings, 1);

        q.apply_ecn_config(EcnConfig::from_kb(320, 640, 0.5).unwrap(), SimTime(0))
            .unwrap();
        assert!(q.config().k_min < q.config().k_max);
        assert_eq!(q.counters().clamp_warnings, 2);
    }

    #[test]
    fn fifo_and_counters() {
        let mut q = PortQueue::new(1 << 30, EcnConfig::from_kb(1, 2, 1.0).unwrap(), 4);
        for i in 0..10u64 {
            let mut p = pkt(1000);
            p.seq = i;
            q.enqueue(p, SimTime(i));
        }
        let order: Vec<u64> = std::iter::from_fn(|| q.dequeue(SimTime(100)).map(|p| p.seq)).collect();
        assert_eq!(order, (0..10).collect::<Vec<_>>());
        let c = q.counters();
        assert!(c.tx_marked_bytes <= c.tx_bytes);
        assert_eq!(c.tx_bytes, 10_000);
    }

    #[test]
    fn qlen_integral_tracks_area() {
        let mut q = PortQueue::new(1 << 30, EcnConfig::secn2(0.2), 4);
        q.enqueue(pkt(1000), SimTime(100));
        q.dequeue(SimTime(300));
        assert_eq!(q.qlen_integral(SimTime(1000)), 1000 * 200);
    }

    proptest! {
        #[test]
        fn marking_is_monotone_in_qlen(
            k_min in 1u64..500_000,
            span in 1u64..500_000,
            p_idx in 0u32..20,
            a in 0u64..1_200_000,
            b in 0u64..1_200_000,
        ) {
            let cfg = EcnConfig::new(k_min, k_min + span, 0.05 * (p_idx + 1) as f64).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(mark_probability(lo, &cfg) <= mark_probability(hi, &cfg));
        }

        #[test]
        fn fifo_order_and_byte_accounting(sizes in proptest::collection::vec(1u32..3000, 1..60)) {
            let mut q = PortQueue::new(40_000, EcnConfig::from_kb(2, 20, 0.5).unwrap(), 11);
            let mut accepted = Vec::new();
            for (i, s) in sizes.iter().enumerate() {
                let mut p = pkt(*s);
                p.seq = i as u64;
                if q.enqueue(p, SimTime(0)) != EnqueueOutcome::Dropped {
                    accepted.push(i as u64);
                }
                prop_assert!(q.qlen_bytes() <= q.capacity());
                prop_assert_eq!(q.qlen_bytes(), q.iter().map(|p| p.size as u64).sum::<u64>());
            }
            let mut out = Vec::new();
            while let Some(p) = q.dequeue(SimTime(1)) {
                out.push(p.seq);
                prop_assert!(q.counters().tx_marked_bytes <= q.counters().tx_bytes);
            }
            prop_assert_eq!(out, accepted);
        }
    }
}
