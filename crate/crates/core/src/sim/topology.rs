//! Leaf-spine fabric layout, port indexing and ECMP routing.

use serde::{Deserialize, Serialize};

use crate::error::{PetError, Result};
use crate::packet::HostId;
use crate::units::{serialization_ns, splitmix64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Topology {
    pub n_spine: usize,
    pub n_leaf: usize,
    pub hosts_per_leaf: usize,
    pub host_rate_bps: u64,
    pub host_delay_ns: u64,
    pub fabric_rate_bps: u64,
    pub fabric_delay_ns: u64,
    /// Egress buffer per switch port, bytes.
    pub buffer_bytes: u64,
}

impl Default for Topology {
    /// Desk-scale fabric: 2 spines, 4 leaves, 8 hosts per leaf.
    fn default() -> Self {
        Topology {
            n_spine: 2,
            n_leaf: 4,
            hosts_per_leaf: 8,
            host_rate_bps: 10_000_000_000,
            host_delay_ns: 4_000,
            fabric_rate_bps: 40_000_000_000,
            fabric_delay_ns: 4_000,
            buffer_bytes: 300 * 1024,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Node {
    Host(u16),
    Leaf(u16),
    Spine(u16),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PortRole {
    /// Host NIC towards its leaf.
    HostNic,
    /// Leaf towards one of its hosts.
    LeafDown,
    /// Leaf towards a spine.
    LeafUp,
    /// Spine towards a leaf.
    SpineDown,
}

/// Static description of one directed link and the egress queue feeding it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PortInfo {
    pub from: Node,
    pub to: Node,
    pub role: PortRole,
    pub rate_bps: u64,
    pub delay_ns: u64,
    /// Fabric link id for leaf/spine ports.
    pub link: Option<usize>,
}

impl PortInfo {
    pub fn is_switch_port(&self) -> bool {
        self.role != PortRole::HostNic
    }

    /// `(switch label, local port number)` for queue logs.
    pub fn switch_label(&self, topo: &Topology) -> (String, usize) {
        match (self.from, self.to) {
            (Node::Leaf(l), Node::Host(h)) => (format!("leaf{l}"), h as usize % topo.hosts_per_leaf),
            (Node::Leaf(l), Node::Spine(s)) => (format!("leaf{l}"), topo.hosts_per_leaf + s as usize),
            (Node::Spine(s), Node::Leaf(l)) => (format!("spine{s}"), l as usize),
            (Node::Host(h), _) => (format!("host{h}"), 0),
            _ => ("?".into(), 0),
        }
    }
}

impl Topology {
    /// The 288-host fabric: 6 spines, 12 leaves of 24 hosts, 25G/100G.
    pub fn paper_scale() -> Self {
        Topology {
            n_spine: 6,
            n_leaf: 12,
            hosts_per_leaf: 24,
            host_rate_bps: 25_000_000_000,
            host_delay_ns: 1_000,
            fabric_rate_bps: 100_000_000_000,
            fabric_delay_ns: 1_000,
            buffer_bytes: 300 * 1024,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_spine == 0 || self.n_leaf == 0 || self.hosts_per_leaf == 0 {
            return Err(PetError::Config("topology counts must be >= 1".into()));
        }
        if self.host_rate_bps == 0 || self.fabric_rate_bps == 0 {
            return Err(PetError::Config("link rates must be positive".into()));
        }
        if self.host_delay_ns == 0 || self.fabric_delay_ns == 0 {
            return Err(PetError::Config("link delays must be positive".into()));
        }
        if self.buffer_bytes == 0 {
            return Err(PetError::Config("buffer_bytes must be positive".into()));
        }
        if self.host_count() > u16::MAX as usize {
            return Err(PetError::Config("too many hosts".into()));
        }
        Ok(())
    }

    pub fn host_count(&self) -> usize {
        self.n_leaf * self.hosts_per_leaf
    }

    pub fn fabric_link_count(&self) -> usize {
        self.n_leaf * self.n_spine
    }

    pub fn port_count(&self) -> usize {
        2 * self.host_count() + 2 * self.fabric_link_count()
    }

    pub fn leaf_of(&self, host: HostId) -> usize {
        host as usize / self.hosts_per_leaf
    }

    pub fn host_nic_port(&self, host: HostId) -> usize {
        host as usize
    }

    pub fn leaf_down_port(&self, host: HostId) -> usize {
        self.host_count() + host as usize
    }

    pub fn leaf_up_port(&self, leaf: usize, spine: usize) -> usize {
        2 * self.host_count() + leaf * self.n_spine + spine
    }

    pub fn spine_down_port(&self, spine: usize, leaf: usize) -> usize {
        2 * self.host_count() + self.fabric_link_count() + spine * self.n_leaf + leaf
    }

    pub fn fabric_link_id(&self, leaf: usize, spine: usize) -> usize {
        leaf * self.n_spine + spine
    }

    /// Both directed ports of a fabric link: (leaf->spine, spine->leaf).
    pub fn fabric_link_ports(&self, link: usize) -> (usize, usize) {
        let leaf = link / self.n_spine;
        let spine = link % self.n_spine;
        (self.leaf_up_port(leaf, spine), self.spine_down_port(spine, leaf))
    }

    pub fn ports(&self) -> Vec<PortInfo> {
        let h = self.host_count();
        let mut ports = Vec::with_capacity(self.port_count());
        for host in 0..h {
            ports.push(PortInfo {
                from: Node::Host(host as u16),
                to: Node::Leaf(self.leaf_of(host as HostId) as u16),
                role: PortRole::HostNic,
                rate_bps: self.host_rate_bps,
                delay_ns: self.host_delay_ns,
                link: None,
            });
        }
        for host in 0..h {
            ports.push(PortInfo {
                from: Node::Leaf(self.leaf_of(host as HostId) as u16),
                to: Node::Host(host as u16),
                role: PortRole::LeafDown,
                rate_bps: self.host_rate_bps,
                delay_ns: self.host_delay_ns,
                link: None,
            });
        }
        for leaf in 0..self.n_leaf {
            for spine in 0..self.n_spine {
                ports.push(PortInfo {
                    from: Node::Leaf(leaf as u16),
                    to: Node::Spine(spine as u16),
                    role: PortRole::LeafUp,
                    rate_bps: self.fabric_rate_bps,
                    delay_ns: self.fabric_delay_ns,
                    link: Some(self.fabric_link_id(leaf, spine)),
                });
            }
        }
        for spine in 0..self.n_spine {
            for leaf in 0..self.n_leaf {
                ports.push(PortInfo {
                    from: Node::Spine(spine as u16),
                    to: Node::Leaf(leaf as u16),
                    role: PortRole::SpineDown,
                    rate_bps: self.fabric_rate_bps,
                    delay_ns: self.fabric_delay_ns,
                    link: Some(self.fabric_link_id(leaf, spine)),
                });
            }
        }
        debug_assert_eq!(ports.len(), self.port_count());
        ports
    }

    /// Directed ports traversed from `src` to `dst` using `spine` when the
    /// hosts sit under different leaves.
    pub fn path_ports(&self, src: HostId, dst: HostId, spine: usize) -> Vec<usize> {
        let (ls, ld) = (self.leaf_of(src), self.leaf_of(dst));
        if ls == ld {
            vec![self.host_nic_port(src), self.leaf_down_port(dst)]
        } else {
            vec![
                self.host_nic_port(src),
                self.leaf_up_port(ls, spine),
                self.spine_down_port(spine, ld),
                self.leaf_down_port(dst),
            ]
        }
    }

    fn path_links(&self, src: HostId, dst: HostId) -> Vec<(u64, u64)> {
        let host = (self.host_rate_bps, self.host_delay_ns);
        let fabric = (self.fabric_rate_bps, self.fabric_delay_ns);
        if self.leaf_of(src) == self.leaf_of(dst) {
            vec![host, host]
        } else {
            vec![host, fabric, fabric, host]
        }
    }

    /// Unloaded round trip of one full data packet and its ACK.
    pub fn base_rtt_ns(&self, src: HostId, dst: HostId, mtu: u32, ack_bytes: u32) -> u64 {
        self.path_links(src, dst)
            .iter()
            .map(|&(rate, delay)| {
                2 * delay + serialization_ns(mtu as u64, rate) + serialization_ns(ack_bytes as u64, rate)
            })
            .sum()
    }

    /// Largest base RTT over all host pairs (a cross-leaf pair when one exists).
    pub fn max_base_rtt_ns(&self, mtu: u32, ack_bytes: u32) -> u64 {
        let far = if self.n_leaf > 1 {
            self.hosts_per_leaf as HostId
        } else {
            1.min(self.host_count() as HostId - 1)
        };
        self.base_rtt_ns(0, far, mtu, ack_bytes)
            .max(self.base_rtt_ns(0, 0, mtu, ack_bytes))
    }

    pub fn bottleneck_bps(&self, src: HostId, dst: HostId) -> u64 {
        self.path_links(src, dst)
            .iter()
            .map(|&(rate, _)| rate)
            .min()
            .unwrap()
    }
}

/// Hash of a flow's 5-tuple. Data and ACK directions hash independently.
pub fn flow_hash(src: HostId, dst: HostId, flow: u32) -> u64 {
    splitmix64(((src as u64) << 48) ^ ((dst as u64) << 32) ^ flow as u64)
}

/// Deterministic ECMP choice: a pure function of the flow hash and the
/// candidate set.
pub fn ecmp_pick(hash: u64, candidates: &[usize]) -> Option<usize> {
    if candidates.is_empty() {
        None
    } else {
        Some(candidates[(hash % candidates.len() as u64) as usize])
    }
}
