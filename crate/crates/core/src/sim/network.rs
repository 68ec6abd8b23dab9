//! Packet-level fabric simulation: queues, links, ECMP forwarding, DCTCP
//! endpoints, slot monitoring and the agent tick.

use std::collections::VecDeque;
use std::panic::{catch_unwind, AssertUnwindSafe};

use serde::{Deserialize, Serialize};

use super::event::EventQueue;
use super::topology::{ecmp_pick, flow_hash, Node, PortInfo, PortRole, Topology};
use crate::agent::{AgentPool, IntervalStats, TickInput};
use crate::error::{PetError, Result};
use crate::ncm::{observe_slot, ActiveFlow, NetState, PortSnapshot};
use crate::packet::{FlowId, HostId, Packet};
use crate::queue::{EcnConfig, EnqueueOutcome, PortQueue};
use crate::traffic::FlowSpec;
use crate::transport::{on_window_complete, record_fct, DctcpParams, FctRecord, Flow};
use crate::units::{serialization_ns, stream_seed, SimTime, KB, NS_PER_SEC};

const QUEUE_STREAM: u64 = 0x51E0;
/// Capacity standing in for "unbounded".
pub const UNBOUNDED: u64 = u64::MAX / 4;

/// Static run parameters shared by every scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub topology: Topology,
    pub dctcp: DctcpParams,
    /// Marking at host NICs, identical for every scheme.
    pub host_ecn: EcnConfig,
    pub seed: u64,
    /// Agent decision interval.
    pub delta_t_ns: u64,
    /// Monitor slots per decision interval.
    pub k: usize,
    pub record_queue: bool,
    pub record_states: bool,
}

/// Ten base RTTs of the largest path, rounded up to a multiple of 8 µs.
pub fn default_delta_t(topology: &Topology, dctcp: &DctcpParams) -> u64 {
    let raw = 10 * topology.max_base_rtt_ns(dctcp.mtu, dctcp.ack_bytes);
    raw.div_ceil(8_000) * 8_000
}

/// Step marking at 40 KB.
pub fn default_host_ecn() -> EcnConfig {
    EcnConfig {
        k_min: 40 * KB,
        k_max: 40 * KB + 1,
        p_max: 1.0,
    }
}

impl SimConfig {
    pub fn new(topology: Topology, seed: u64) -> Self {
        let dctcp = DctcpParams::default();
        SimConfig {
            delta_t_ns: default_delta_t(&topology, &dctcp),
            topology,
            dctcp,
            host_ecn: default_host_ecn(),
            seed,
            k: 8,
            record_queue: true,
            record_states: false,
        }
    }

    pub fn slot_ns(&self) -> u64 {
        self.delta_t_ns / self.k as u64
    }

    pub fn validate(&self) -> Result<()> {
        self.topology.validate()?;
        self.host_ecn.validate()?;
        if self.k == 0 {
            return Err(PetError::Config("k must be at least 1".into()));
        }
        if self.delta_t_ns % self.k as u64 != 0 {
            return Err(PetError::Config(format!(
                "delta_t_ns {} is not a multiple of k = {}",
                self.delta_t_ns, self.k
            )));
        }
        let min = 10 * self.topology.max_base_rtt_ns(self.dctcp.mtu, self.dctcp.ack_bytes);
        if self.delta_t_ns < min {
            return Err(PetError::Config(format!(
                "delta_t_ns {} is below ten base RTTs ({min} ns)",
                self.delta_t_ns
            )));
        }
        if self.dctcp.mtu == 0 || self.dctcp.ack_bytes == 0 {
            return Err(PetError::Config("mtu and ack size must be positive".into()));
        }
        Ok(())
    }
}

/// How switch egress queues get their marking configuration.
#[derive(Debug)]
pub enum EcnPolicy {
    /// No marking at switch ports.
    Unmarked,
    /// One configuration installed at start and never changed.
    Static(EcnConfig),
    /// One agent per switch egress port; ports start from `initial`.
    Agents { pool: Box<AgentPool>, initial: EcnConfig },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DropCause {
    Overflow,
    LinkDown,
    NoRoute,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DropEvent {
    pub t_ns: u64,
    pub port: usize,
    pub cause: DropCause,
}

/// Aggregate counters. Byte counts cover data and ACK packets alike.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SimStats {
    pub events: u64,
    pub packets_injected: u64,
    pub packets_delivered: u64,
    pub packets_dropped: u64,
    pub bytes_injected: u64,
    pub bytes_delivered: u64,
    pub bytes_dropped: u64,
    pub bytes_in_flight: u64,
    pub drops_overflow: u64,
    pub drops_link_down: u64,
    pub drops_no_route: u64,
    /// Data bytes reaching receivers, duplicates included.
    pub data_bytes_delivered: u64,
    /// Data bytes accepted in order.
    pub goodput_bytes: u64,
    pub ce_delivered: u64,
    pub ece_sent: u64,
    pub ece_received: u64,
    pub flows_started: u64,
    pub flows_completed: u64,
    pub timeouts: u64,
    pub marked: u64,
    pub ecn_applies: u64,
    pub clamp_warnings: u64,
    pub trace_hash: u64,
}

impl SimStats {
    pub fn conserved(&self) -> bool {
        self.bytes_injected == self.bytes_delivered + self.bytes_dropped + self.bytes_in_flight
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QueueSample {
    pub t_ns: u64,
    pub port: usize,
    pub qlen_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StateRecord {
    pub t_ns: u64,
    pub port: usize,
    pub state: NetState,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EcnApply {
    pub t_ns: u64,
    pub port: usize,
    pub config: EcnConfig,
}

#[derive(Debug, Clone, Copy)]
enum Ev {
    /// The oldest packet on the wire behind `port` reaches the far end.
    Arrival { port: u32, epoch: u32 },
    TxDone { port: u32, epoch: u32 },
    FlowStart,
    Rto { flow: FlowId },
    Slot { index: u64 },
    Link { link: u32, up: bool },
}

impl Ev {
    fn name(&self) -> &'static str {
        match self {
            Ev::Arrival { .. } => "packet-arrival",
            Ev::TxDone { .. } => "packet-departure",
            Ev::FlowStart => "flow-start",
            Ev::Rto { .. } => "rto",
            Ev::Slot { .. } => "slot-boundary",
            Ev::Link { .. } => "link-state-change",
        }
    }

    fn digest(&self) -> u64 {
        match *self {
            Ev::Arrival { port, epoch } => 1 ^ (port as u64) << 8 ^ (epoch as u64) << 40,
            Ev::TxDone { port, .. } => 2 ^ (port as u64) << 8,
            Ev::FlowStart => 3,
            Ev::Rto { flow } => 4 ^ (flow as u64) << 8,
            Ev::Slot { index } => 5 ^ index << 8,
            Ev::Link { link, up } => 6 ^ (link as u64) << 8 ^ (up as u64) << 40,
        }
    }
}

#[derive(Debug, Clone)]
struct Port {
    info: PortInfo,
    queue: PortQueue,
    /// Packets serialized onto the link and not yet arrived, oldest first.
    wire: VecDeque<Packet>,
    in_tx: bool,
    up: bool,
    epoch: u32,
}

/// Per-switch-port bookkeeping for monitoring and decisions.
#[derive(Debug, Clone, Default)]
struct Monitor {
    seen: Vec<FlowId>,
    last_seen: Option<FlowId>,
    prev_tx: u64,
    prev_tx_marked: u64,
    tick_tx: u64,
    tick_integral: u128,
}

pub struct Simulation {
    cfg: SimConfig,
    events: EventQueue<Ev>,
    ports: Vec<Port>,
    switch_ports: Vec<usize>,
    monitors: Vec<Monitor>,
    flows: Vec<Flow>,
    rto_pending: Vec<bool>,
    pending_flows: Vec<FlowSpec>,
    next_pending: usize,
    flow_start_at: Option<SimTime>,
    active_flows: usize,
    pool: Option<Box<AgentPool>>,
    agent_of_port: Vec<Option<usize>>,
    track_active: bool,
    stats: SimStats,
    wire_bytes: u64,
    fct: Vec<FctRecord>,
    queue_samples: Vec<QueueSample>,
    states: Vec<StateRecord>,
    applies: Vec<EcnApply>,
    drops: Vec<DropEvent>,
    current: Option<(SimTime, u64, &'static str)>,
    poisoned: bool,
}

impl Simulation {
    pub fn new(cfg: SimConfig, policy: EcnPolicy) -> Result<Self> {
        cfg.validate()?;
        let topo = cfg.topology;
        let infos = topo.ports();
        let mut ports = Vec::with_capacity(infos.len());
        let mut switch_ports = Vec::new();
        for (i, info) in infos.into_iter().enumerate() {
            let seed = stream_seed(cfg.seed, QUEUE_STREAM, i as u64);
            let queue = if info.role == PortRole::HostNic {
                PortQueue::new(UNBOUNDED, cfg.host_ecn, seed)
            } else {
                switch_ports.push(i);
                PortQueue::without_marking(topo.buffer_bytes, seed)
            };
            ports.push(Port {
                info,
                queue,
                wire: VecDeque::new(),
                in_tx: false,
                up: true,
                epoch: 0,
            });
        }
        let mut sim = Simulation {
            events: EventQueue::new(),
            monitors: vec![Monitor::default(); ports.len()],
            agent_of_port: vec![None; ports.len()],
            ports,
            switch_ports,
            flows: Vec::new(),
            rto_pending: Vec::new(),
            pending_flows: Vec::new(),
            next_pending: 0,
            flow_start_at: None,
            active_flows: 0,
            pool: None,
            track_active: cfg.record_states,
            stats: SimStats::default(),
            wire_bytes: 0,
            fct: Vec::new(),
            queue_samples: Vec::new(),
            states: Vec::new(),
            applies: Vec::new(),
            drops: Vec::new(),
            current: None,
            poisoned: false,
            cfg,
        };
        match policy {
            EcnPolicy::Unmarked => {}
            EcnPolicy::Static(c) => {
                for i in 0..sim.switch_ports.len() {
                    let p = sim.switch_ports[i];
                    sim.apply(p, c, SimTime::ZERO)?;
                }
            }
            EcnPolicy::Agents { pool, initial } => {
                initial.validate()?;
                for (i, a) in pool.agents.iter().enumerate() {
                    let p = a.port;
                    if p >= sim.ports.len() || !sim.ports[p].info.is_switch_port() {
                        return Err(PetError::Config(format!("agent bound to non-switch port {p}")));
                    }
                    if sim.agent_of_port[p].replace(i).is_some() {
                        return Err(PetError::Config(format!("two agents on port {p}")));
                    }
                }
                for i in 0..sim.switch_ports.len() {
                    let p = sim.switch_ports[i];
                    let q = &mut sim.ports[p].queue;
                    q.apply_ecn_config(initial, SimTime::ZERO)?;
                }
                sim.track_active = true;
                sim.pool = Some(pool);
            }
        }
        sim.events.schedule(SimTime::ZERO, Ev::Slot { index: 0 });
        Ok(sim)
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn now(&self) -> SimTime {
        self.events.now()
    }

    pub fn port_info(&self, port: usize) -> &PortInfo {
        &self.ports[port].info
    }

    pub fn switch_ports(&self) -> &[usize] {
        &self.switch_ports
    }

    pub fn queue(&self, port: usize) -> &PortQueue {
        &self.ports[port].queue
    }

    pub fn flows(&self) -> &[Flow] {
        &self.flows
    }

    pub fn fct_records(&self) -> &[FctRecord] {
        &self.fct
    }

    pub fn queue_samples(&self) -> &[QueueSample] {
        &self.queue_samples
    }

    pub fn state_log(&self) -> &[StateRecord] {
        &self.states
    }

    pub fn ecn_applies(&self) -> &[EcnApply] {
        &self.applies
    }

    pub fn drop_log(&self) -> &[DropEvent] {
        &self.drops
    }

    pub fn pool(&self) -> Option<&AgentPool> {
        self.pool.as_deref()
    }

    pub fn take_pool(&mut self) -> Option<AgentPool> {
        self.pool.take().map(|b| *b)
    }

    /// Flows added but not yet finished (including those not yet started).
    pub fn unfinished_flows(&self) -> usize {
        self.active_flows + (self.pending_flows.len() - self.next_pending)
    }

    /// Bytes queued or on a wire, recomputed from port state.
    pub fn bytes_in_network(&self) -> u64 {
        self.ports.iter().map(|p| p.queue.qlen_bytes()).sum::<u64>() + self.wire_bytes
    }

    pub fn stats(&self) -> SimStats {
        let mut s = self.stats.clone();
        s.marked = self.ports.iter().map(|p| p.queue.counters().marked).sum();
        s.clamp_warnings = self.ports.iter().map(|p| p.queue.counters().clamp_warnings).sum();
        s
    }

    /// Queues flows for injection. Flows must not start before the current
    /// time; ids follow start order.
    pub fn add_flows(&mut self, mut flows: Vec<FlowSpec>) -> Result<()> {
        let hosts = self.cfg.topology.host_count();
        for f in &flows {
            if f.size_bytes == 0 {
                return Err(PetError::Config("zero-size flow".into()));
            }
            if f.src as usize >= hosts || f.dst as usize >= hosts || f.src == f.dst {
                return Err(PetError::Config(format!("bad endpoints {} -> {}", f.src, f.dst)));
            }
            if SimTime(f.start_ns) < self.now() {
                return Err(PetError::Config(format!("flow start {} ns is in the past", f.start_ns)));
            }
        }
        let mut rest = self.pending_flows.split_off(self.next_pending);
        rest.append(&mut flows);
        rest.sort_by_key(|f| (f.start_ns, f.src, f.dst, f.size_bytes));
        self.pending_flows = rest;
        self.next_pending = 0;
        if let Some(f) = self.pending_flows.first() {
            let at = SimTime(f.start_ns);
            if self.flow_start_at.map_or(true, |armed| at < armed) {
                self.flow_start_at = Some(at);
                self.events.schedule(at, Ev::FlowStart);
            }
        }
        Ok(())
    }

    /// Takes a fabric link down or up at `at`.
    pub fn set_link_state(&mut self, link: usize, up: bool, at: SimTime) -> Result<()> {
        if link >= self.cfg.topology.fabric_link_count() {
            return Err(PetError::Config(format!("unknown link id {link}")));
        }
        if at < self.now() {
            return Err(PetError::Config(format!("link change at {at} is in the past")));
        }
        self.events.schedule(at, Ev::Link { link: link as u32, up });
        Ok(())
    }

    pub fn link_up(&self, link: usize) -> bool {
        let (a, _) = self.cfg.topology.fabric_link_ports(link);
        self.ports[a].up
    }

    /// Dispatches every event with time `<= t_end`.
    pub fn run_until(&mut self, t_end: SimTime) -> Result<SimStats> {
        self.run_inner(t_end, false)
    }

    /// Runs until every added flow has finished and the network is empty,
    /// or `limit` is reached.
    pub fn run_to_completion(&mut self, limit: SimTime) -> Result<SimStats> {
        self.run_inner(limit, true)
    }

    fn run_inner(&mut self, t_end: SimTime, stop_when_idle: bool) -> Result<SimStats> {
        if self.poisoned {
            return Err(PetError::Config("simulation aborted earlier by a handler panic".into()));
        }
        let outcome = catch_unwind(AssertUnwindSafe(|| -> Result<()> {
            while let Some((t, seq, ev)) = self.events.pop_until(t_end) {
                if stop_when_idle && self.unfinished_flows() == 0 && self.stats.bytes_in_flight == 0 {
                    self.events.schedule(t, ev);
                    return Ok(());
                }
                self.current = Some((t, seq, ev.name()));
                self.stats.events += 1;
                let h = self.stats.trace_hash ^ t.as_ns().rotate_left(17) ^ seq.rotate_left(41) ^ ev.digest();
                self.stats.trace_hash = h.wrapping_mul(0x0000_0100_0000_01B3).rotate_left(5);
                self.dispatch(t, ev)?;
            }
            if !stop_when_idle || self.unfinished_flows() > 0 {
                self.events.advance_to(t_end.max(self.now()));
            }
            Ok(())
        }));
        match outcome {
            Ok(r) => {
                self.current = None;
                r?;
                Ok(self.stats())
            }
            Err(payload) => {
                self.poisoned = true;
                let msg = payload
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "unknown panic".into());
                let (time, seq, kind) = self.current.unwrap_or((self.now(), 0, "none"));
                Err(PetError::HandlerPanic {
                    time,
                    seq,
                    kind,
                    msg,
                })
            }
        }
    }

    fn dispatch(&mut self, now: SimTime, ev: Ev) -> Result<()> {
        match ev {
            Ev::Arrival { port, epoch } => {
                let p = &mut self.ports[port as usize];
                if p.epoch == epoch {
                    let pkt = p.wire.pop_front().expect("arrival without a packet on the wire");
                    self.on_arrival(port as usize, pkt, now);
                }
            }
            Ev::TxDone { port, epoch } => {
                let p = &mut self.ports[port as usize];
                if p.epoch == epoch {
                    p.in_tx = false;
                    self.start_tx(port as usize, now);
                }
            }
            Ev::FlowStart => self.on_flow_start(now),
            Ev::Rto { flow } => self.on_rto(flow, now),
            Ev::Slot { index } => self.on_slot(index, now)?,
            Ev::Link { link, up } => self.on_link(link as usize, up, now),
        }
        Ok(())
    }

    fn drop_packet(&mut self, pkt: &Packet, port: usize, cause: DropCause, now: SimTime) {
        let size = pkt.size as u64;
        self.stats.packets_dropped += 1;
        self.stats.bytes_dropped += size;
        self.stats.bytes_in_flight -= size;
        match cause {
            DropCause::Overflow => self.stats.drops_overflow += 1,
            DropCause::LinkDown => self.stats.drops_link_down += 1,
            DropCause::NoRoute => self.stats.drops_no_route += 1,
        }
        self.drops.push(DropEvent {
            t_ns: now.as_ns(),
            port,
            cause,
        });
    }

    fn inject(&mut self, pkt: Packet, host: HostId, now: SimTime) {
        self.stats.packets_injected += 1;
        self.stats.bytes_injected += pkt.size as u64;
        self.stats.bytes_in_flight += pkt.size as u64;
        let port = self.cfg.topology.host_nic_port(host);
        self.enqueue(port, pkt, now);
    }

    fn enqueue(&mut self, port: usize, pkt: Packet, now: SimTime) {
        if !self.ports[port].up {
            self.drop_packet(&pkt, port, DropCause::LinkDown, now);
            return;
        }
        if self.track_active && pkt.is_data() {
            let m = &mut self.monitors[port];
            if m.last_seen != Some(pkt.flow) {
                m.seen.push(pkt.flow);
                m.last_seen = Some(pkt.flow);
            }
        }
        match self.ports[port].queue.enqueue(pkt, now) {
            EnqueueOutcome::Dropped => self.drop_packet(&pkt, port, DropCause::Overflow, now),
            _ => {
                if !self.ports[port].in_tx {
                    self.start_tx(port, now);
                }
            }
        }
    }

    fn start_tx(&mut self, port: usize, now: SimTime) {
        let p = &mut self.ports[port];
        if p.in_tx || !p.up {
            return;
        }
        let Some(pkt) = p.queue.dequeue(now) else { return };
        p.in_tx = true;
        let ser = serialization_ns(pkt.size as u64, p.info.rate_bps);
        let epoch = p.epoch;
        let delay = p.info.delay_ns;
        p.wire.push_back(pkt);
        self.wire_bytes += pkt.size as u64;
        self.events.schedule(now + SimTime(ser), Ev::TxDone { port: port as u32, epoch });
        self.events.schedule(now + SimTime(ser + delay), Ev::Arrival { port: port as u32, epoch });
    }

    fn on_arrival(&mut self, port: usize, pkt: Packet, now: SimTime) {
        self.wire_bytes -= pkt.size as u64;
        let topo = self.cfg.topology;
        match self.ports[port].info.to {
            Node::Host(h) => {
                debug_assert_eq!(h, pkt.dst);
                self.stats.packets_delivered += 1;
                self.stats.bytes_delivered += pkt.size as u64;
                self.stats.bytes_in_flight -= pkt.size as u64;
                if pkt.is_data() {
                    self.on_data(pkt, now);
                } else {
                    self.on_ack(pkt, now);
                }
            }
            Node::Leaf(l) => {
                let l = l as usize;
                let dst_leaf = topo.leaf_of(pkt.dst);
                if dst_leaf == l {
                    self.enqueue(topo.leaf_down_port(pkt.dst), pkt, now);
                    return;
                }
                let usable = |s: usize| {
                    self.ports[topo.leaf_up_port(l, s)].up && self.ports[topo.spine_down_port(s, dst_leaf)].up
                };
                let hash = flow_hash(pkt.src, pkt.dst, pkt.flow);
                let spine = if (0..topo.n_spine).all(usable) {
                    Some((hash % topo.n_spine as u64) as usize)
                } else {
                    let candidates: Vec<usize> = (0..topo.n_spine).filter(|&s| usable(s)).collect();
                    ecmp_pick(hash, &candidates)
                };
                match spine {
                    Some(s) => self.enqueue(topo.leaf_up_port(l, s), pkt, now),
                    None => self.drop_packet(&pkt, port, DropCause::NoRoute, now),
                }
            }
            Node::Spine(s) => {
                let out = topo.spine_down_port(s as usize, topo.leaf_of(pkt.dst));
                self.enqueue(out, pkt, now);
            }
        }
    }

    fn on_data(&mut self, pkt: Packet, now: SimTime) {
        let ack_bytes = self.cfg.dctcp.ack_bytes;
        let f = &mut self.flows[pkt.flow as usize];
        self.stats.data_bytes_delivered += pkt.size as u64;
        if pkt.ce {
            f.ce_received += 1;
            self.stats.ce_delivered += 1;
        }
        if pkt.seq == f.rcv_nxt {
            f.rcv_nxt += pkt.size as u64;
            self.stats.goodput_bytes += pkt.size as u64;
        }
        let ack = Packet::ack_for(&pkt, f.rcv_nxt, ack_bytes);
        if ack.ece {
            f.ece_sent += 1;
            self.stats.ece_sent += 1;
        }
        let host = f.dst;
        self.inject(ack, host, now);
    }

    fn on_ack(&mut self, ack: Packet, now: SimTime) {
        let params = self.cfg.dctcp;
        let id = ack.flow as usize;
        if ack.ece {
            self.stats.ece_received += 1;
        }
        let f = &mut self.flows[id];
        if f.is_complete() {
            return;
        }
        f.cc.window_total += 1;
        if ack.ece {
            f.cc.window_marked += 1;
        }
        if ack.seq > f.bytes_acked {
            let sample = now.as_ns().saturating_sub(ack.ts) as f64;
            f.srtt_ns = if f.srtt_ns == 0.0 {
                sample
            } else {
                0.875 * f.srtt_ns + 0.125 * sample
            };
            f.bytes_acked = ack.seq;
            f.snd_nxt = f.snd_nxt.max(f.bytes_acked);
            f.backoff = 0;
            f.rto_deadline = now + SimTime(f.rto_ns(&params));
            if f.bytes_acked >= f.size {
                f.fct = Some(now - f.start);
                f.rto_armed = false;
                self.active_flows -= 1;
                self.stats.flows_completed += 1;
                let topo = self.cfg.topology;
                let rec = record_fct(
                    f,
                    topo.bottleneck_bps(f.src, f.dst),
                    topo.base_rtt_ns(f.src, f.dst, params.mtu, params.ack_bytes),
                )
                .expect("completed flow");
                self.fct.push(rec);
                return;
            }
        }
        if f.bytes_acked >= f.window_end && f.cc.window_total > 0 {
            f.cc = on_window_complete(f.cc.window_marked, f.cc.window_total, f.cc, params.mtu);
            f.window_end = f.snd_nxt;
        }
        self.try_send(id, now);
    }

    fn try_send(&mut self, id: usize, now: SimTime) {
        let params = self.cfg.dctcp;
        let mtu = params.mtu as u64;
        loop {
            let f = &mut self.flows[id];
            if f.snd_nxt >= f.size {
                break;
            }
            let seg = mtu.min(f.size - f.snd_nxt);
            let in_flight = f.snd_nxt - f.bytes_acked;
            if in_flight > 0 && (in_flight + seg) as f64 > f.cc.cwnd.max(mtu as f64) {
                break;
            }
            let pkt = Packet::data(f.id, f.src, f.dst, f.snd_nxt, seg as u32, now.as_ns());
            f.snd_nxt += seg;
            f.bytes_sent = f.bytes_sent.max(f.snd_nxt);
            if !f.rto_armed {
                f.rto_armed = true;
                f.rto_deadline = now + SimTime(f.rto_ns(&params));
            }
            let src = f.src;
            self.inject(pkt, src, now);
        }
        let f = &self.flows[id];
        if f.rto_armed && !self.rto_pending[id] {
            self.rto_pending[id] = true;
            let at = f.rto_deadline;
            self.events.schedule(at, Ev::Rto { flow: id as FlowId });
        }
    }

    fn on_flow_start(&mut self, now: SimTime) {
        if self.flow_start_at != Some(now) {
            return;
        }
        self.flow_start_at = None;
        while let Some(spec) = self.pending_flows.get(self.next_pending).copied() {
            if SimTime(spec.start_ns) > now {
                self.flow_start_at = Some(SimTime(spec.start_ns));
                self.events.schedule(SimTime(spec.start_ns), Ev::FlowStart);
                return;
            }
            self.next_pending += 1;
            let id = self.flows.len();
            let mut f = Flow::new(id as FlowId, spec.src, spec.dst, spec.size_bytes, now, &self.cfg.dctcp);
            f.window_end = (f.cc.cwnd as u64).min(f.size);
            self.flows.push(f);
            self.rto_pending.push(false);
            self.active_flows += 1;
            self.stats.flows_started += 1;
            self.try_send(id, now);
        }
    }

    fn on_rto(&mut self, id: FlowId, now: SimTime) {
        let params = self.cfg.dctcp;
        let idx = id as usize;
        self.rto_pending[idx] = false;
        let f = &mut self.flows[idx];
        if f.is_complete() || !f.rto_armed {
            return;
        }
        if now < f.rto_deadline {
            self.rto_pending[idx] = true;
            let at = f.rto_deadline;
            self.events.schedule(at, Ev::Rto { flow: id });
            return;
        }
        f.timeouts += 1;
        self.stats.timeouts += 1;
        f.backoff += 1;
        f.snd_nxt = f.bytes_acked;
        f.cc.cwnd = params.mtu as f64;
        f.cc.window_marked = 0;
        f.cc.window_total = 0;
        f.window_end = f.bytes_acked + params.mtu as u64;
        f.rto_deadline = now + SimTime(f.rto_ns(&params));
        self.try_send(idx, now);
    }

    fn on_link(&mut self, link: usize, up: bool, now: SimTime) {
        let (a, b) = self.cfg.topology.fabric_link_ports(link);
        for p in [a, b] {
            if up {
                self.ports[p].up = true;
                continue;
            }
            if !self.ports[p].up {
                continue;
            }
            let port = &mut self.ports[p];
            port.up = false;
            port.epoch += 1;
            port.in_tx = false;
            let mut lost = port.queue.flush(now);
            let on_wire: Vec<Packet> = port.wire.drain(..).collect();
            for pkt in &on_wire {
                self.wire_bytes -= pkt.size as u64;
            }
            lost.extend(on_wire);
            for pkt in lost {
                self.drop_packet(&pkt, p, DropCause::LinkDown, now);
            }
        }
    }

    fn apply(&mut self, port: usize, config: EcnConfig, now: SimTime) -> Result<()> {
        self.ports[port].queue.apply_ecn_config(config, now)?;
        self.stats.ecn_applies += 1;
        self.applies.push(EcnApply {
            t_ns: now.as_ns(),
            port,
            config,
        });
        Ok(())
    }

    fn active_at(&mut self, port: usize) -> Vec<ActiveFlow> {
        let m = &mut self.monitors[port];
        m.seen.sort_unstable();
        m.seen.dedup();
        let out = m
            .seen
            .iter()
            .map(|&id| {
                let f = &self.flows[id as usize];
                ActiveFlow {
                    flow: id,
                    src: f.src,
                    dst: f.dst,
                    cumulative_bytes: f.bytes_sent,
                }
            })
            .collect();
        m.seen.clear();
        m.last_seen = None;
        out
    }

    fn on_slot(&mut self, index: u64, now: SimTime) -> Result<()> {
        let slot_ns = self.cfg.slot_ns();
        if index > 0 {
            for i in 0..self.switch_ports.len() {
                let p = self.switch_ports[i];
                let q = &self.ports[p].queue;
                let snapshot = PortSnapshot {
                    qlen: q.qlen_bytes(),
                    tx_bytes: q.counters().tx_bytes,
                    tx_marked_bytes: q.counters().tx_marked_bytes,
                    config: *q.config(),
                };
                if self.cfg.record_queue {
                    self.queue_samples.push(QueueSample {
                        t_ns: now.as_ns(),
                        port: p,
                        qlen_bytes: snapshot.qlen,
                    });
                }
                if !self.track_active {
                    continue;
                }
                let active = self.active_at(p);
                let m = &mut self.monitors[p];
                let state = observe_slot(&snapshot, m.prev_tx, m.prev_tx_marked, &active, slot_ns);
                m.prev_tx = snapshot.tx_bytes;
                m.prev_tx_marked = snapshot.tx_marked_bytes;
                if self.cfg.record_states {
                    self.states.push(StateRecord {
                        t_ns: now.as_ns(),
                        port: p,
                        state,
                    });
                }
                if let (Some(pool), Some(a)) = (self.pool.as_mut(), self.agent_of_port[p]) {
                    pool.agents[a].ncm.record(now, state);
                }
            }
            if self.pool.is_some() && index % self.cfg.k as u64 == 0 {
                self.agent_tick(now)?;
            }
        }
        self.events.schedule(now + SimTime(slot_ns), Ev::Slot { index: index + 1 });
        Ok(())
    }

    fn agent_tick(&mut self, now: SimTime) -> Result<()> {
        let dt = self.cfg.delta_t_ns as f64;
        let mtu = self.cfg.dctcp.mtu as f64;
        let pool = self.pool.as_mut().expect("agent tick without agents");
        let mut inputs = Vec::with_capacity(pool.agents.len());
        for a in &pool.agents {
            let port = &mut self.ports[a.port];
            let m = &mut self.monitors[a.port];
            let tx = port.queue.counters().tx_bytes;
            let integral = port.queue.qlen_integral(now);
            inputs.push(TickInput {
                interval: IntervalStats {
                    tx_rate_bps: (tx - m.tick_tx) as f64 * 8.0 * NS_PER_SEC as f64 / dt,
                    link_bw_bps: port.info.rate_bps as f64,
                    avg_qlen_packets: (integral - m.tick_integral) as f64 / dt / mtu,
                },
            });
            m.tick_tx = tx;
            m.tick_integral = integral;
        }
        let configs = pool.tick(&inputs, now)?;
        for (port, cfg) in configs {
            self.apply(port, cfg, now)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Topology {
        Topology {
            n_spine: 2,
            n_leaf: 2,
            hosts_per_leaf: 2,
            ..Topology::default()
        }
    }

    fn flow(start_ns: u64, src: HostId, dst: HostId, size: u64) -> FlowSpec {
        FlowSpec {
            start_ns,
            src,
            dst,
            size_bytes: size,
        }
    }

    #[test]
    fn empty_run_has_zero_counters() {
        let mut sim = Simulation::new(SimConfig::new(small(), 1), EcnPolicy::Unmarked).unwrap();
        let s = sim.run_until(SimTime::from_ms(1)).unwrap();
        assert_eq!(s.packets_injected, 0);
        assert_eq!(s.bytes_dropped, 0);
        assert!(s.conserved());
    }

    #[test]
    fn ten_packet_flow_is_delivered() {
        let mut sim = Simulation::new(SimConfig::new(small(), 1), EcnPolicy::Unmarked).unwrap();
        sim.add_flows(vec![flow(0, 0, 3, 10_000)]).unwrap();
        let s = sim.run_to_completion(SimTime::from_ms(10)).unwrap();
        assert_eq!(s.flows_completed, 1);
        assert_eq!(s.goodput_bytes, 10_000);
        assert_eq!(s.packets_dropped, 0);
        // 10 data packets and 10 ACKs
        assert_eq!(s.packets_delivered, 20);
        assert_eq!(s.bytes_in_flight, 0);
        assert!(s.conserved());
    }

    #[test]
    fn single_packet_fct_matches_base_rtt() {
        let topo = small();
        let mut sim = Simulation::new(SimConfig::new(topo, 1), EcnPolicy::Unmarked).unwrap();
        sim.add_flows(vec![flow(0, 0, 2, 1000)]).unwrap();
        sim.run_to_completion(SimTime::from_ms(10)).unwrap();
        let rec = &sim.fct_records()[0];
        assert_eq!(rec.fct_ns, topo.base_rtt_ns(0, 2, 1000, 40));
    }

    #[test]
    fn downed_link_is_avoided_and_restore_is_drop_free() {
        let topo = small();
        let mut sim = Simulation::new(SimConfig::new(topo, 1), EcnPolicy::Unmarked).unwrap();
        let link = topo.fabric_link_id(0, 0);
        sim.set_link_state(link, false, SimTime::from_us(1)).unwrap();
        sim.set_link_state(link, true, SimTime::from_us(2)).unwrap();
        sim.run_until(SimTime::from_us(10)).unwrap();
        assert_eq!(sim.stats().packets_dropped, 0);
        sim.set_link_state(link, false, SimTime::from_us(20)).unwrap();
        sim.add_flows((0..20).map(|i| flow(30_000, 0, 2, 5000 + i)).collect()).unwrap();
        sim.run_to_completion(SimTime::from_ms(20)).unwrap();
        let up0 = topo.leaf_up_port(0, 0);
        assert_eq!(sim.queue(up0).counters().enqueued, 0);
        assert_eq!(sim.stats().packets_dropped, 0);
        assert!(sim.set_link_state(99, true, SimTime::from_ms(30)).is_err());
    }

    #[test]
    fn static_policy_applies_once_per_switch_port() {
        let mut sim = Simulation::new(SimConfig::new(small(), 1), EcnPolicy::Static(EcnConfig::secn1(0.2))).unwrap();
        sim.run_until(SimTime::from_ms(1)).unwrap();
        assert_eq!(sim.ecn_applies().len(), sim.switch_ports().len());
        assert!(sim.ecn_applies().iter().all(|a| a.config == EcnConfig::secn1(0.2)));
    }

    #[test]
    fn delta_t_default_is_ten_rtts_rounded() {
        let t = Topology::default();
        let d = DctcpParams::default();
        assert_eq!(t.max_base_rtt_ns(d.mtu, d.ack_bytes), 34_080);
        assert_eq!(default_delta_t(&t, &d), 344_000);
        let mut c = SimConfig::new(t, 0);
        c.delta_t_ns = 300_000;
        assert!(c.validate().is_err());
    }
}
