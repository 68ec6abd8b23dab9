//! Discrete-event engine, fabric topology and the packet-level simulation.

pub mod event;
pub mod network;
pub mod topology;

pub use event::EventQueue;
pub use network::{
    default_delta_t, default_host_ecn, DropCause, DropEvent, EcnApply, EcnPolicy, QueueSample, SimConfig, SimStats,
    Simulation, StateRecord, UNBOUNDED,
};
pub use topology::{ecmp_pick, flow_hash, Node, PortInfo, PortRole, Topology};
