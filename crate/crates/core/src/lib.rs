//! Packet-level simulation of an ECN-enabled leaf-spine fabric in which every
//! switch egress port runs an independent PPO agent that tunes its marking
//! thresholds.

pub mod agent;
pub mod error;
pub mod experiment;
pub mod learner;
pub mod ncm;
pub mod packet;
pub mod par;
pub mod queue;
pub mod sim;
pub mod traffic;
pub mod transport;
pub mod units;

pub use error::{PetError, Result};
