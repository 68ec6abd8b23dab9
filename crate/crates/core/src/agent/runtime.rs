//! Per-port agents: state assembly, reward, action selection and learning.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::reward::{compute_reward, IntervalStats, RewardSpec};
use crate::error::{PetError, Result};
use crate::learner::checkpoint::ModelState;
use crate::learner::mlp::MlpCache;
use crate::learner::policy::{select_action, ActionChoice, SelectMode};
use crate::learner::ppo::{Hyperparams, Learner, PpoSample, RolloutBuffer, Transition, UpdateStats};
use crate::learner::action::action_to_ecn;
use crate::ncm::Ncm;
use crate::par::{self, Parallelism};
use crate::queue::EcnConfig;
use crate::units::{stream_seed, SimTime};

const AGENT_STREAM: u64 = 0xA6E7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentMode {
    /// Stochastic actions at a fixed exploration rate; experience from all
    /// ports feeds one shared model.
    OfflinePretrain,
    /// Each port trains its own model with decaying exploration.
    Online,
    /// Actions only; nothing is stored or updated.
    FrozenEval,
}

/// Per-tick input gathered from the port by the simulator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TickInput {
    pub interval: IntervalStats,
}

#[derive(Debug, Clone)]
struct Pending {
    state: Vec<f64>,
    choice: ActionChoice,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct AgentStats {
    pub reward_sum: f64,
    pub reward_count: u64,
    pub updates: Vec<UpdateStats>,
    pub applies: u64,
    pub min_apply_gap_ns: Option<u64>,
}

impl AgentStats {
    pub fn mean_reward(&self) -> Option<f64> {
        (self.reward_count > 0).then(|| self.reward_sum / self.reward_count as f64)
    }
}

/// One egress port's agent. Owns its monitor, trajectory and RNG; never
/// reads another agent's state.
#[derive(Debug, Clone)]
pub struct PortAgent {
    pub port: usize,
    pub ncm: Ncm,
    buffer: RolloutBuffer,
    pending: Option<Pending>,
    rng: ChaCha8Rng,
    cache: MlpCache,
    last_apply: Option<SimTime>,
    pub stats: AgentStats,
}

impl PortAgent {
    pub fn new(port: usize, ncm: Ncm, seed: u64) -> Self {
        PortAgent {
            port,
            ncm,
            buffer: RolloutBuffer::default(),
            pending: None,
            rng: ChaCha8Rng::seed_from_u64(stream_seed(seed, AGENT_STREAM, port as u64)),
            cache: MlpCache::default(),
            last_apply: None,
            stats: AgentStats::default(),
        }
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    /// Book-keeping shared by all modes: closes the previous transition
    /// with this interval's reward.
    fn close_interval(&mut self, input: &TickInput, reward: &RewardSpec, store: bool) {
        if let Some(p) = self.pending.take() {
            let r = compute_reward(reward, &input.interval);
            self.stats.reward_sum += r;
            self.stats.reward_count += 1;
            if store {
                self.buffer.push(Transition {
                    state_seq: p.state,
                    action: p.choice.action,
                    reward: r,
                    logp: p.choice.logp,
                    value: p.choice.value,
                    done: false,
                });
            }
        }
    }

    fn note_apply(&mut self, now: SimTime) {
        if let Some(prev) = self.last_apply {
            let gap = (now - prev).as_ns();
            self.stats.min_apply_gap_ns = Some(self.stats.min_apply_gap_ns.map_or(gap, |g| g.min(gap)));
        }
        self.last_apply = Some(now);
        self.stats.applies += 1;
    }

    /// Ends the current episode: the trajectory is cut and the pending
    /// action dropped.
    pub fn end_episode(&mut self) {
        self.pending = None;
        self.last_apply = None;
        self.buffer.mark_last_done();
    }
}

/// Where the policy parameters live.
#[derive(Debug, Clone)]
pub enum Learners {
    Shared(Box<Learner>),
    PerPort(Vec<Learner>),
}

/// The set of agents on every switch egress port plus their learners.
#[derive(Debug, Clone)]
pub struct AgentPool {
    pub agents: Vec<PortAgent>,
    pub learners: Learners,
    pub mode: AgentMode,
    pub hp: Hyperparams,
    pub reward: RewardSpec,
    pub greedy_eval: bool,
    pub parallelism: Parallelism,
    shared_updates: Vec<UpdateStats>,
}

impl AgentPool {
    pub fn new(agents: Vec<PortAgent>, learners: Learners, mode: AgentMode, hp: Hyperparams, reward: RewardSpec) -> Result<Self> {
        hp.validate()?;
        reward.validate()?;
        if let Learners::PerPort(ls) = &learners {
            if ls.len() != agents.len() {
                return Err(PetError::Config(format!(
                    "{} learners for {} agents",
                    ls.len(),
                    agents.len()
                )));
            }
        }
        if mode == AgentMode::Online && matches!(learners, Learners::Shared(_)) {
            return Err(PetError::Config("online mode needs one learner per port".into()));
        }
        Ok(AgentPool {
            agents,
            learners,
            mode,
            hp,
            reward,
            greedy_eval: true,
            parallelism: Parallelism::available(),
            shared_updates: Vec::new(),
        })
    }

    /// Installs models from a checkpoint: one model is copied to every
    /// port, otherwise there must be exactly one per port.
    pub fn learners_from_models(
        models: Vec<ModelState>,
        ports: usize,
        shared: bool,
        hp: &Hyperparams,
        seed: u64,
    ) -> Result<Learners> {
        if shared {
            if models.len() != 1 {
                return Err(PetError::Checkpoint(format!(
                    "shared mode needs a single-model checkpoint, got {}",
                    models.len()
                )));
            }
            let m = models.into_iter().next().unwrap();
            return Ok(Learners::Shared(Box::new(m.into_learner(hp.clone(), seed)?)));
        }
        let models = match models.len() {
            1 => vec![models[0].clone(); ports],
            n if n == ports => models,
            n => {
                return Err(PetError::Checkpoint(format!(
                    "checkpoint holds {n} models for {ports} ports"
                )))
            }
        };
        models
            .into_iter()
            .enumerate()
            .map(|(i, m)| m.into_learner(hp.clone(), stream_seed(seed, AGENT_STREAM + 1, i as u64)))
            .collect::<Result<Vec<_>>>()
            .map(Learners::PerPort)
    }

    pub fn fresh_learners(hp: &Hyperparams, ports: usize, shared: bool, seed: u64) -> Learners {
        let init = Learner::new(hp.clone(), stream_seed(seed, AGENT_STREAM + 2, 0));
        if shared {
            Learners::Shared(Box::new(init))
        } else {
            Learners::PerPort(
                (0..ports)
                    .map(|i| {
                        let mut l = init.clone();
                        l.reseed(stream_seed(seed, AGENT_STREAM + 1, i as u64));
                        l
                    })
                    .collect(),
            )
        }
    }

    pub fn models(&self) -> Vec<ModelState> {
        match &self.learners {
            Learners::Shared(l) => vec![ModelState::from_learner(l)],
            Learners::PerPort(ls) => ls.iter().map(ModelState::from_learner).collect(),
        }
    }

    pub fn shared_updates(&self) -> &[UpdateStats] {
        &self.shared_updates
    }

    pub fn end_episode(&mut self) {
        for a in &mut self.agents {
            a.end_episode();
        }
    }

    /// Runs one decision for every agent. `inputs[i]` belongs to
    /// `agents[i]`. Returns the configuration each port must apply.
    pub fn tick(&mut self, inputs: &[TickInput], now: SimTime) -> Result<Vec<(usize, EcnConfig)>> {
        self.tick_ordered(inputs, now, false)
    }

    /// As [`tick`](Self::tick); `reverse` walks the agents back to front
    /// when running sequentially. Results do not depend on the order.
    pub fn tick_ordered(&mut self, inputs: &[TickInput], now: SimTime, reverse: bool) -> Result<Vec<(usize, EcnConfig)>> {
        assert_eq!(inputs.len(), self.agents.len());
        let mode = self.mode;
        let hp = &self.hp;
        let reward = self.reward;
        let greedy = self.greedy_eval;
        let store = mode != AgentMode::FrozenEval;

        let mut choices: Vec<Result<(ActionChoice, Option<Vec<PpoSample>>)>> = Vec::new();
        match &mut self.learners {
            Learners::PerPort(learners) => {
                let mut work: Vec<(&mut PortAgent, &mut Learner, &TickInput)> = self
                    .agents
                    .iter_mut()
                    .zip(learners.iter_mut())
                    .zip(inputs.iter())
                    .map(|((a, l), i)| (a, l, i))
                    .collect();
                if reverse {
                    work.reverse();
                }
                let mut out: Vec<Option<Result<ActionChoice>>> = Vec::new();
                out.resize_with(work.len(), || None);
                let mut pairs: Vec<_> = work.into_iter().zip(out.iter_mut()).collect();
                par::for_each_mut(&mut pairs, self.parallelism, |((agent, learner, input), slot)| {
                    **slot = Some(step_own(agent, learner, input, mode, hp, &reward, greedy, store));
                });
                drop(pairs);
                if reverse {
                    out.reverse();
                }
                choices.extend(out.into_iter().map(|o| o.unwrap().map(|c| (c, None))));
            }
            Learners::Shared(learner) => {
                let learner: &Learner = learner;
                let mut work: Vec<(&mut PortAgent, &TickInput, Option<Result<(ActionChoice, Option<Vec<PpoSample>>)>>)> =
                    self.agents.iter_mut().zip(inputs.iter()).map(|(a, i)| (a, i, None)).collect();
                par::for_each_mut(&mut work, self.parallelism, |(agent, input, slot)| {
                    *slot = Some(step_shared(agent, learner, input, mode, hp, &reward, greedy, store));
                });
                choices.extend(work.into_iter().map(|(_, _, s)| s.unwrap()));
            }
        }

        let mut configs = Vec::with_capacity(choices.len());
        let mut pooled: Vec<PpoSample> = Vec::new();
        for (agent, res) in self.agents.iter_mut().zip(choices) {
            let (choice, drained) = res?;
            if let Some(s) = drained {
                pooled.extend(s);
            }
            agent.note_apply(now);
            configs.push((agent.port, action_to_ecn(choice.action, hp.alpha_scale_kb)));
        }
        if !pooled.is_empty() {
            if let Learners::Shared(l) = &mut self.learners {
                let stats = l.ppo_update(pooled)?;
                self.shared_updates.push(stats);
                for a in &mut self.agents {
                    a.stats.updates.push(stats);
                }
            }
        }
        for a in &mut self.agents {
            a.ncm.run_cleanup(now);
        }
        Ok(configs)
    }
}

fn select_mode(mode: AgentMode, greedy: bool, eps: f64) -> SelectMode {
    match mode {
        AgentMode::FrozenEval if greedy => SelectMode::Greedy,
        AgentMode::FrozenEval => SelectMode::Explore { eps: 0.0 },
        _ => SelectMode::Explore { eps },
    }
}

#[allow(clippy::too_many_arguments)]
fn step_own(
    agent: &mut PortAgent,
    learner: &mut Learner,
    input: &TickInput,
    mode: AgentMode,
    hp: &Hyperparams,
    reward: &RewardSpec,
    greedy: bool,
    store: bool,
) -> Result<ActionChoice> {
    agent.close_interval(input, reward, store);
    let state = agent.ncm.window();
    if store && agent.buffer.len() >= hp.rollout_len {
        let bootstrap = learner.ac.value(&state, &mut agent.cache);
        let samples = agent.buffer.drain_samples(bootstrap, hp.gamma, hp.lambda);
        let stats = learner.ppo_update(samples)?;
        agent.stats.updates.push(stats);
    }
    let eps = match mode {
        AgentMode::OfflinePretrain => hp.eps0,
        _ => learner.epsilon(),
    };
    let choice = select_action(&learner.ac, &state, select_mode(mode, greedy, eps), &mut agent.rng, &mut agent.cache)?;
    if store {
        agent.pending = Some(Pending { state, choice });
    }
    Ok(choice)
}

#[allow(clippy::too_many_arguments)]
fn step_shared(
    agent: &mut PortAgent,
    learner: &Learner,
    input: &TickInput,
    mode: AgentMode,
    hp: &Hyperparams,
    reward: &RewardSpec,
    greedy: bool,
    store: bool,
) -> Result<(ActionChoice, Option<Vec<PpoSample>>)> {
    agent.close_interval(input, reward, store);
    let state = agent.ncm.window();
    let mut drained = None;
    if store && agent.buffer.len() >= hp.rollout_len {
        let bootstrap = learner.ac.value(&state, &mut agent.cache);
        drained = Some(agent.buffer.drain_samples(bootstrap, hp.gamma, hp.lambda));
    }
    let eps = match mode {
        AgentMode::OfflinePretrain => hp.eps0,
        _ => learner.epsilon(),
    };
    let choice = select_action(&learner.ac, &state, select_mode(mode, greedy, eps), &mut agent.rng, &mut agent.cache)?;
    if store {
        agent.pending = Some(Pending { state, choice });
    }
    Ok((choice, drained))
}
