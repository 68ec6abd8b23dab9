//! Agent loop tying the monitor, learner and queue configuration together,
//! plus offline/online training orchestration.

pub mod reward;
pub mod runtime;
pub mod training;

pub use reward::{compute_reward, IntervalStats, RewardSpec};
pub use runtime::{AgentMode, AgentPool, Learners, PortAgent, TickInput};
