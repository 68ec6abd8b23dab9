//! DCTCP-style sender congestion control and flow lifecycle.

use serde::{Deserialize, Serialize};

use crate::error::{PetError, Result};
use crate::packet::{FlowId, HostId};
use crate::units::{SimTime, MB};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowClass {
    Mouse,
    Elephant,
}

impl FlowClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            FlowClass::Mouse => "mouse",
            FlowClass::Elephant => "elephant",
        }
    }
}

/// A flow is an elephant once its cumulative size strictly exceeds 1 MB (2^20 bytes).
pub fn classify_flow(cumulative_bytes: u64) -> FlowClass {
    if cumulative_bytes > MB {
        FlowClass::Elephant
    } else {
        FlowClass::Mouse
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DctcpParams {
    /// EWMA gain for the marked fraction.
    pub g: f64,
    pub mtu: u32,
    pub init_cwnd_pkts: u32,
    pub ack_bytes: u32,
    /// Floor on the retransmission timeout.
    pub rto_min_ns: u64,
}

impl Default for DctcpParams {
    fn default() -> Self {
        DctcpParams {
            g: 1.0 / 16.0,
            mtu: 1000,
            init_cwnd_pkts: 16,
            ack_bytes: 40,
            rto_min_ns: 1_000_000,
        }
    }
}

/// Per-flow DCTCP window state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SenderCc {
    /// Congestion window in bytes.
    pub cwnd: f64,
    pub alpha: f64,
    pub g: f64,
    pub window_marked: u64,
    pub window_total: u64,
}

impl SenderCc {
    pub fn new(cwnd: f64, g: f64) -> Self {
        SenderCc {
            cwnd,
            alpha: 0.0,
            g,
            window_marked: 0,
            window_total: 0,
        }
    }
}

/// Once-per-window DCTCP update: EWMA of the marked fraction, then either a
/// proportional cut (any mark seen) or one MTU of additive increase.
pub fn on_window_complete(marked: u64, total: u64, cc: SenderCc, mtu: u32) -> SenderCc {
    debug_assert!(total >= 1 && marked <= total);
    let frac = marked as f64 / total.max(1) as f64;
    let mut next = cc;
    next.alpha = ((1.0 - cc.g) * cc.alpha + cc.g * frac).clamp(0.0, 1.0);
    let mtu = mtu as f64;
    next.cwnd = if marked > 0 {
        (cc.cwnd * (1.0 - next.alpha / 2.0)).max(mtu)
    } else {
        cc.cwnd + mtu
    };
    next.window_marked = 0;
    next.window_total = 0;
    next
}

/// One flow: sender and receiver state live together since the simulator
/// owns both ends.
#[derive(Debug, Clone)]
pub struct Flow {
    pub id: FlowId,
    pub src: HostId,
    pub dst: HostId,
    pub size: u64,
    pub start: SimTime,
    pub bytes_acked: u64,
    pub fct: Option<SimTime>,
    // sender
    pub cc: SenderCc,
    pub snd_nxt: u64,
    /// Highest byte ever sent; drives mice/elephant classification.
    pub bytes_sent: u64,
    pub window_end: u64,
    pub srtt_ns: f64,
    pub rto_deadline: SimTime,
    pub rto_armed: bool,
    pub backoff: u32,
    pub timeouts: u32,
    // receiver
    pub rcv_nxt: u64,
    pub ce_received: u64,
    pub ece_sent: u64,
}

impl Flow {
    pub fn new(
        id: FlowId,
        src: HostId,
        dst: HostId,
        size: u64,
        start: SimTime,
        params: &DctcpParams,
    ) -> Self {
        assert!(size > 0, "zero-size flow");
        Flow {
            id,
            src,
            dst,
            size,
            start,
            bytes_acked: 0,
            fct: None,
            cc: SenderCc::new((params.init_cwnd_pkts.max(1) * params.mtu) as f64, params.g),
            snd_nxt: 0,
            bytes_sent: 0,
            window_end: 0,
            srtt_ns: 0.0,
            rto_deadline: SimTime::ZERO,
            rto_armed: false,
            backoff: 0,
            timeouts: 0,
            rcv_nxt: 0,
            ce_received: 0,
            ece_sent: 0,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.fct.is_some()
    }

    pub fn class(&self) -> FlowClass {
        classify_flow(self.size)
    }

    pub fn in_flight(&self) -> u64 {
        self.snd_nxt - self.bytes_acked
    }

    /// Retransmission timeout: twice the smoothed RTT, floored, with backoff.
    pub fn rto_ns(&self, params: &DctcpParams) -> u64 {
        let base = ((2.0 * self.srtt_ns) as u64).max(params.rto_min_ns);
        base << self.backoff.min(6)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FctRecord {
    pub flow_id: FlowId,
    pub src: HostId,
    pub dst: HostId,
    pub size: u64,
    pub start_ns: u64,
    pub fct_ns: u64,
    pub norm_fct: f64,
    pub class: FlowClass,
}

/// Ideal completion time: serialization at the bottleneck plus the unloaded RTT.
pub fn ideal_fct_ns(size: u64, bottleneck_bps: u64, base_rtt_ns: u64) -> f64 {
    size as f64 * 8.0 * 1e9 / bottleneck_bps as f64 + base_rtt_ns as f64
}

pub fn record_fct(flow: &Flow, bottleneck_bps: u64, base_rtt_ns: u64) -> Result<FctRecord> {
    let fct = flow.fct.ok_or(PetError::IncompleteFlow(flow.id))?;
    let ideal = ideal_fct_ns(flow.size, bottleneck_bps, base_rtt_ns);
    Ok(FctRecord {
        flow_id: flow.id,
        src: flow.src,
        dst: flow.dst,
        size: flow.size,
        start_ns: flow.start.as_ns(),
        fct_ns: fct.as_ns(),
        norm_fct: fct.as_ns() as f64 / ideal,
        class: flow.class(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MTU: u32 = 1000;

    #[test]
    fn alpha_update_full_marking() {
        let cc = SenderCc::new(16.0 * 1000.0, 1.0 / 16.0);
        let next = on_window_complete(10, 10, cc, MTU);
        assert!((next.alpha - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn multiplicative_cut_uses_alpha() {
        let mut cc = SenderCc::new(16_000.0, 0.0);
        cc.alpha = 0.5;
        // g = 0 keeps alpha at 0.5 so the cut is exactly 1 - 0.25.
        let next = on_window_complete(3, 10, cc, MTU);
        assert_eq!(next.cwnd, 12_000.0);
    }

    #[test]
    fn unmarked_window_decays_alpha_and_grows() {
        let mut cc = SenderCc::new(8_000.0, 1.0 / 16.0);
        cc.alpha = 0.4;
        let next = on_window_complete(0, 8, cc, MTU);
        assert!((next.alpha - 0.4 * 15.0 / 16.0).abs() < 1e-15);
        assert_eq!(next.cwnd, 9_000.0);
    }

    #[test]
    fn elephant_boundary_is_strict() {
        assert_eq!(classify_flow(1_048_577), FlowClass::Elephant);
        assert_eq!(classify_flow(1_048_576), FlowClass::Mouse);
        assert_eq!(classify_flow(0), FlowClass::Mouse);
    }

    #[test]
    fn fct_requires_completion() {
        let p = DctcpParams::default();
        let mut f = Flow::new(3, 0, 1, 1000, SimTime(10), &p);
        assert!(matches!(
            record_fct(&f, 10_000_000_000, 30_000),
            Err(PetError::IncompleteFlow(3))
        ));
        f.fct = Some(SimTime(30_800));
        let r = record_fct(&f, 10_000_000_000, 30_000).unwrap();
        assert!((r.norm_fct - 1.0).abs() < 1e-12);
        assert_eq!(r.class, FlowClass::Mouse);
    }

    #[test]
    #[should_panic(expected = "zero-size")]
    fn zero_size_flow_rejected() {
        Flow::new(0, 0, 1, 0, SimTime::ZERO, &DctcpParams::default());
    }

    proptest! {
        #[test]
        fn cwnd_and_alpha_stay_bounded(
            windows in proptest::collection::vec((0u64..50, 1u64..50), 1..200),
        ) {
            let mut cc = SenderCc::new(10_000.0, 1.0 / 16.0);
            for (m, t) in windows {
                let marked = m.min(t);
                cc = on_window_complete(marked, t, cc, MTU);
                prop_assert!(cc.cwnd >= MTU as f64);
                prop_assert!((0.0..=1.0).contains(&cc.alpha));
            }
        }
    }
}
