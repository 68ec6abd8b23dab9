//! Independent PPO learner: networks, losses, optimizer, checkpoints.

pub mod action;
pub mod adam;
pub mod checkpoint;
pub mod mlp;
pub mod policy;
pub mod ppo;

pub use action::{action_to_ecn, exploration_epsilon, ActionIndex};
pub use checkpoint::ModelState;
pub use policy::{select_action, ActionChoice, ActorCritic, SelectMode};
pub use ppo::{compute_gae, Hyperparams, Learner, PpoSample, RolloutBuffer, Transition, UpdateStats};
