//! Network condition monitor: per-port slot statistics, normalization,
//! k-slot state windows and expiry cleanup.

use std::collections::VecDeque;

use serde::Serialize;

use crate::packet::{FlowId, HostId};
use crate::queue::EcnConfig;
use crate::transport::{classify_flow, FlowClass};
use crate::units::{SimTime, KB, NS_PER_SEC};

/// Components per normalized slot.
pub const STATE_DIM: usize = 6;
pub const IDX_INCAST: usize = 4;
pub const IDX_RATIO: usize = 5;

/// Raw per-slot observation of one egress port.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NetState {
    pub qlen: u64,
    pub tx_rate: f64,
    pub tx_rate_marked: f64,
    pub ecn_current: EcnConfig,
    pub d_incast: u32,
    pub r_flow: f64,
}

/// Counters read from the port queue at a slot boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PortSnapshot {
    pub qlen: u64,
    pub tx_bytes: u64,
    pub tx_marked_bytes: u64,
    pub config: EcnConfig,
}

/// A flow seen at the port during the slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ActiveFlow {
    pub flow: FlowId,
    pub src: HostId,
    pub dst: HostId,
    /// Bytes the sender has pushed so far.
    pub cumulative_bytes: u64,
}

/// Largest number of distinct senders towards any single destination.
pub fn incast_degree(active: &[ActiveFlow]) -> u32 {
    let mut pairs: Vec<(HostId, HostId)> = active.iter().map(|f| (f.dst, f.src)).collect();
    pairs.sort_unstable();
    pairs.dedup();
    let mut best = 0u32;
    let mut run = 0u32;
    let mut cur: Option<HostId> = None;
    for (dst, _) in pairs {
        if cur == Some(dst) {
            run += 1;
        } else {
            cur = Some(dst);
            run = 1;
        }
        best = best.max(run);
    }
    best
}

/// Fraction of active flows that are mice; 0.5 when nothing is active.
pub fn flow_ratio(active: &[ActiveFlow]) -> f64 {
    if active.is_empty() {
        return 0.5;
    }
    let mice = active
        .iter()
        .filter(|f| classify_flow(f.cumulative_bytes) == FlowClass::Mouse)
        .count();
    mice as f64 / active.len() as f64
}

/// Builds the slot observation from byte counts accumulated over `slot_ns`.
/// `active` must hold each flow once.
pub fn observe_slot(
    snapshot: &PortSnapshot,
    prev_tx_bytes: u64,
    prev_tx_marked_bytes: u64,
    active: &[ActiveFlow],
    slot_ns: u64,
) -> NetState {
    let to_rate = |bytes: u64| bytes as f64 * 8.0 * NS_PER_SEC as f64 / slot_ns as f64;
    NetState {
        qlen: snapshot.qlen,
        tx_rate: to_rate(snapshot.tx_bytes - prev_tx_bytes),
        tx_rate_marked: to_rate(snapshot.tx_marked_bytes - prev_tx_marked_bytes),
        ecn_current: snapshot.config,
        d_incast: incast_degree(active),
        r_flow: flow_ratio(active),
    }
}

/// Scales used to map raw observations into [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormEnv {
    pub buffer_capacity: u64,
    pub link_rate_bps: u64,
    pub host_count: usize,
    pub alpha_kb: u64,
    pub max_n: u8,
}

pub type NormalizedState = [f64; STATE_DIM];

fn clamp01(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(0.0, 1.0)
    }
}

/// Position of K_min on the exponential threshold grid, as a fraction of `max_n`.
pub fn ecn_index_fraction(cfg: &EcnConfig, alpha_kb: u64, max_n: u8) -> f64 {
    let n = (cfg.k_min as f64 / (alpha_kb * KB) as f64).log2();
    clamp01(n / max_n as f64)
}

pub fn normalize(state: &NetState, env: &NormEnv) -> NormalizedState {
    let rate = env.link_rate_bps as f64;
    [
        clamp01(state.qlen as f64 / env.buffer_capacity as f64),
        clamp01(state.tx_rate / rate),
        clamp01(state.tx_rate_marked / rate),
        ecn_index_fraction(&state.ecn_current, env.alpha_kb, env.max_n),
        clamp01(state.d_incast.min(env.host_count as u32) as f64 / env.host_count as f64),
        clamp01(state.r_flow),
    ]
}

/// Re-clamps every component; a no-op on normalized states.
pub fn renormalize(s: &NormalizedState) -> NormalizedState {
    s.map(clamp01)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CleanupStats {
    pub scheduled_evicted: u64,
    pub threshold_evicted: u64,
    pub threshold_triggers: u64,
}

/// Per-port monitor. Buffers time-stamped slots, exposes the newest `k` as
/// a fixed-size sequence, and keeps auxiliary raw records for reward and
/// logging until they expire.
#[derive(Debug, Clone)]
pub struct Ncm {
    k: usize,
    slot_ns: u64,
    env: NormEnv,
    slots: VecDeque<(SimTime, NormalizedState)>,
    aux: VecDeque<(SimTime, NetState)>,
    record_budget: usize,
    threshold: f64,
    prev_tx: u64,
    prev_tx_marked: u64,
    observed: u64,
    /// Components forced to zero (ablation).
    masked: [bool; STATE_DIM],
    pub cleanup: CleanupStats,
}

impl Ncm {
    pub fn new(k: usize, slot_ns: u64, env: NormEnv) -> Self {
        Ncm {
            k,
            slot_ns,
            env,
            slots: VecDeque::with_capacity(2 * k),
            aux: VecDeque::new(),
            record_budget: 64,
            threshold: 0.8,
            prev_tx: 0,
            prev_tx_marked: 0,
            observed: 0,
            masked: [false; STATE_DIM],
            cleanup: CleanupStats::default(),
        }
    }

    pub fn with_record_budget(mut self, budget: usize, threshold: f64) -> Self {
        self.record_budget = budget.max(1);
        self.threshold = threshold;
        self
    }

    pub fn mask_component(&mut self, idx: usize) {
        self.masked[idx] = true;
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn env(&self) -> &NormEnv {
        &self.env
    }

    pub fn slots_observed(&self) -> u64 {
        self.observed
    }

    pub fn buffered_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn aux_records(&self) -> usize {
        self.aux.len()
    }

    /// Records one slot at `now` and returns the raw observation.
    pub fn observe(&mut self, snapshot: &PortSnapshot, active: &[ActiveFlow], now: SimTime) -> NetState {
        let state = observe_slot(snapshot, self.prev_tx, self.prev_tx_marked, active, self.slot_ns);
        self.prev_tx = snapshot.tx_bytes;
        self.prev_tx_marked = snapshot.tx_marked_bytes;
        self.record(now, state);
        state
    }

    /// Normalizes an externally computed observation and buffers it.
    pub fn record(&mut self, now: SimTime, state: NetState) {
        let mut norm = normalize(&state, &self.env);
        for (v, m) in norm.iter_mut().zip(self.masked) {
            if m {
                *v = 0.0;
            }
        }
        self.push_slot(now, norm);
        self.aux.push_back((now, state));
    }

    /// Forgets all buffered slots and records; masks and counters of
    /// cleanup activity are kept.
    pub fn reset(&mut self) {
        self.slots.clear();
        self.aux.clear();
        self.prev_tx = 0;
        self.prev_tx_marked = 0;
        self.observed = 0;
    }

    pub fn slot_ns(&self) -> u64 {
        self.slot_ns
    }

    pub fn push_slot(&mut self, now: SimTime, s: NormalizedState) {
        self.slots.push_back((now, s));
        self.observed += 1;
    }

    pub fn push_aux(&mut self, now: SimTime, s: NetState) {
        self.aux.push_back((now, s));
    }

    /// The newest `min(k, buffered)` slots, oldest first, zero-padded at
    /// the old end to exactly `k * STATE_DIM` values.
    pub fn window(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.k * STATE_DIM];
        let have = self.slots.len().min(self.k);
        let start = self.k - have;
        for (i, (_, s)) in self.slots.iter().skip(self.slots.len() - have).enumerate() {
            out[(start + i) * STATE_DIM..(start + i + 1) * STATE_DIM].copy_from_slice(s);
        }
        out
    }

    pub fn memory_usage(&self) -> f64 {
        self.aux.len() as f64 / self.record_budget as f64
    }

    /// Scheduled cleanup drops slots and records older than `k` slot
    /// periods; when `memory_usage` reaches the threshold the oldest half
    /// of the remaining auxiliary records is dropped as well.
    pub fn cleanup_expired(&mut self, now: SimTime, memory_usage: f64) {
        let horizon = now.as_ns().saturating_sub(self.k as u64 * self.slot_ns);
        let expired = |t: SimTime| t.as_ns() <= horizon && now.as_ns() >= self.k as u64 * self.slot_ns;
        while self.slots.front().is_some_and(|(t, _)| expired(*t)) {
            self.slots.pop_front();
            self.cleanup.scheduled_evicted += 1;
        }
        while self.aux.front().is_some_and(|(t, _)| expired(*t)) {
            self.aux.pop_front();
            self.cleanup.scheduled_evicted += 1;
        }
        if memory_usage >= self.threshold {
            let n = self.aux.len() / 2;
            self.aux.drain(..n);
            self.cleanup.threshold_evicted += n as u64;
            self.cleanup.threshold_triggers += 1;
        }
    }

    /// Cleanup driven by this monitor's own record usage.
    pub fn run_cleanup(&mut self, now: SimTime) {
        let usage = self.memory_usage();
        self.cleanup_expired(now, usage);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn env() -> NormEnv {
        NormEnv {
            buffer_capacity: 300 * KB,
            link_rate_bps: 10_000_000_000,
            host_count: 32,
            alpha_kb: 20,
            max_n: 9,
        }
    }

    fn af(flow: u32, src: u16, dst: u16, bytes: u64) -> ActiveFlow {
        ActiveFlow {
            flow,
            src,
            dst,
            cumulative_bytes: bytes,
        }
    }

    fn snap(qlen: u64, tx: u64, txm: u64) -> PortSnapshot {
        PortSnapshot {
            qlen,
            tx_bytes: tx,
            tx_marked_bytes: txm,
            config: EcnConfig::secn1(0.2),
        }
    }

    #[test]
    fn rates_from_slot_bytes() {
        let s = observe_slot(&snap(0, 125_000, 0), 0, 0, &[], 100_000);
        assert!((s.tx_rate - 10e9).abs() < 1e-3);
        assert_eq!(s.tx_rate_marked, 0.0);
        let idle = observe_slot(&snap(0, 500, 200), 500, 200, &[], 100_000);
        assert_eq!((idle.tx_rate, idle.tx_rate_marked), (0.0, 0.0));
        let all = observe_slot(&snap(0, 9000, 9000), 0, 0, &[], 100_000);
        assert_eq!(all.tx_rate, all.tx_rate_marked);
    }

    #[test]
    fn incast_examples() {
        let flows = [af(0, 1, 9, 0), af(1, 2, 9, 0), af(2, 3, 9, 0), af(3, 4, 10, 0)];
        assert_eq!(incast_degree(&flows), 3);
        assert_eq!(incast_degree(&[]), 0);
        // two flows from the same sender count once
        assert_eq!(incast_degree(&[af(0, 1, 9, 0), af(1, 1, 9, 0)]), 1);
    }

    #[test]
    fn incast_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let flows: Vec<ActiveFlow> = (0..50)
                .map(|i| af(i, rng.gen_range(0..32), rng.gen_range(0..6), 0))
                .collect();
            let mut best = 0;
            for dst in 0..32u16 {
                let mut senders: Vec<u16> = flows.iter().filter(|f| f.dst == dst).map(|f| f.src).collect();
                senders.sort();
                senders.dedup();
                best = best.max(senders.len() as u32);
            }
            assert_eq!(incast_degree(&flows), best);
        }
    }

    #[test]
    fn ratio_examples() {
        let mb = crate::units::MB;
        let flows = [af(0, 0, 1, mb / 2), af(1, 0, 1, 2 * mb), af(2, 0, 1, 9 * mb / 10)];
        assert!((flow_ratio(&flows) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(flow_ratio(&[]), 0.5);
        assert_eq!(flow_ratio(&[af(0, 0, 1, 2 * mb), af(1, 0, 1, 3 * mb)]), 0.0);
    }

    #[test]
    fn normalize_examples() {
        let mut s = NetState {
            qlen: 75 * KB,
            tx_rate: 0.0,
            tx_rate_marked: 0.0,
            ecn_current: EcnConfig::from_kb(20, 40, 0.1).unwrap(),
            d_incast: 64,
            r_flow: 0.5,
        };
        let n = normalize(&s, &env());
        assert_eq!(n[0], 0.25);
        assert_eq!(n[4], 1.0);
        s.qlen = 0;
        s.d_incast = 0;
        let z = normalize(&s, &env());
        assert_eq!(z, [0.0, 0.0, 0.0, 0.0, 0.0, 0.5]);
        s.ecn_current = EcnConfig::from_kb(80, 160, 0.1).unwrap();
        assert!((normalize(&s, &env())[3] - 2.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn window_zero_pads_old_end() {
        let mut ncm = Ncm::new(4, 10, env());
        assert_eq!(ncm.window(), vec![0.0; 24]);
        ncm.push_slot(SimTime(10), [0.1; 6]);
        ncm.push_slot(SimTime(20), [0.2; 6]);
        let w = ncm.window();
        assert_eq!(&w[..12], &[0.0; 12]);
        assert_eq!(&w[12..18], &[0.1; 6]);
        assert_eq!(&w[18..], &[0.2; 6]);
        for i in 3..=7 {
            ncm.push_slot(SimTime(10 * i), [i as f64 / 10.0; 6]);
        }
        let w = ncm.window();
        assert_eq!(&w[..6], &[0.4; 6]);
        assert_eq!(&w[18..], &[0.7; 6]);
    }

    #[test]
    fn scheduled_cleanup_keeps_k_newest() {
        let mut ncm = Ncm::new(8, 100, env());
        for i in 1..=12u64 {
            ncm.push_slot(SimTime(100 * i), [0.0; 6]);
        }
        ncm.cleanup_expired(SimTime(1200), 0.0);
        assert_eq!(ncm.buffered_slots(), 8);
        assert_eq!(ncm.cleanup.scheduled_evicted, 4);
        assert_eq!(ncm.cleanup.threshold_triggers, 0);
    }

    #[test]
    fn threshold_cleanup_halves_aux_records() {
        let mut ncm = Ncm::new(8, 100, env()).with_record_budget(12, 0.8);
        let s = observe_slot(&snap(0, 0, 0), 0, 0, &[], 100);
        for _ in 0..10 {
            ncm.push_aux(SimTime(1000), s);
        }
        ncm.cleanup_expired(SimTime(1000), 0.79);
        assert_eq!(ncm.aux_records(), 10);
        ncm.run_cleanup(SimTime(1000));
        assert_eq!(ncm.aux_records(), 5);
        assert_eq!(ncm.cleanup.threshold_evicted, 5);
    }

    #[test]
    fn tx_rate_integrates_to_dequeued_bytes() {
        let mut ncm = Ncm::new(8, 1_000, env());
        let mut tx = 0;
        let mut total_bits = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 1..100u64 {
            tx += rng.gen_range(0..2000u64);
            let s = ncm.observe(&snap(0, tx, 0), &[], SimTime(i * 1000));
            total_bits += s.tx_rate * 1_000.0 / 1e9;
        }
        assert!((total_bits - tx as f64 * 8.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn normalized_values_in_unit_interval_and_idempotent(
            qlen in 0u64..10_000_000,
            tx in 0.0f64..1e11,
            frac in 0.0f64..=1.0,
            incast in 0u32..100,
            ratio in 0.0f64..=1.0,
            kmin_kb in 1u64..20_000,
        ) {
            let s = NetState {
                qlen,
                tx_rate: tx,
                tx_rate_marked: tx * frac,
                ecn_current: EcnConfig::new(kmin_kb * KB, kmin_kb * KB + 1, 0.5).unwrap(),
                d_incast: incast,
                r_flow: ratio,
            };
            let n = normalize(&s, &env());
            prop_assert!(n.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(renormalize(&n), n);
        }

        #[test]
        fn window_exposes_min_k_observed(k in 1usize..10, pushes in 0usize..30) {
            let mut ncm = Ncm::new(k, 10, env());
            for i in 0..pushes {
                ncm.push_slot(SimTime(10 * (i as u64 + 1)), [(i + 1) as f64; 6]);
            }
            let w = ncm.window();
            prop_assert_eq!(w.len(), k * STATE_DIM);
            let nonzero = w.chunks(STATE_DIM).filter(|c| c[0] != 0.0).count();
            prop_assert_eq!(nonzero, pushes.min(k));
            if pushes > 0 {
                prop_assert_eq!(w[(k - 1) * STATE_DIM], pushes as f64);
            }
        }
    }
}
