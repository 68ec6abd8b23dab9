//! Offline pretraining on replayed traces and online runs from a checkpoint.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::reward::RewardSpec;
use super::runtime::{AgentMode, AgentPool, AgentStats, Learners, PortAgent};
use crate::error::{PetError, Result};
use crate::learner::action::N_MAX;
use crate::learner::checkpoint::{self, ModelState};
use crate::learner::ppo::Hyperparams;
use crate::ncm::{Ncm, NormEnv};
use crate::queue::EcnConfig;
use crate::sim::{EcnPolicy, SimConfig, Simulation};
use crate::traffic::{read_trace, FlowSpec};
use crate::units::{stream_seed, SimTime};

const EPISODE_STREAM: u64 = 0xE915;

/// Agent-side settings common to every training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentSetup {
    pub hp: Hyperparams,
    pub reward: RewardSpec,
    /// State components forced to zero.
    pub masked: Vec<usize>,
    /// Configuration switch ports hold before the first decision.
    pub initial: EcnConfig,
    pub record_budget: usize,
}

impl Default for AgentSetup {
    fn default() -> Self {
        AgentSetup {
            hp: Hyperparams::default(),
            reward: RewardSpec::web_search(),
            masked: Vec::new(),
            initial: EcnConfig::secn2(0.2),
            record_budget: 64,
        }
    }
}

/// One agent per switch egress port with a fresh monitor.
pub fn build_agents(cfg: &SimConfig, setup: &AgentSetup, seed: u64) -> Vec<PortAgent> {
    let topo = cfg.topology;
    topo.ports()
        .iter()
        .enumerate()
        .filter(|(_, p)| p.is_switch_port())
        .map(|(i, p)| {
            let env = NormEnv {
                buffer_capacity: topo.buffer_bytes,
                link_rate_bps: p.rate_bps,
                host_count: topo.host_count(),
                alpha_kb: setup.hp.alpha_scale_kb,
                max_n: N_MAX,
            };
            let mut ncm = Ncm::new(setup.hp.k, cfg.slot_ns(), env).with_record_budget(setup.record_budget, 0.8);
            for &c in &setup.masked {
                ncm.mask_component(c);
            }
            PortAgent::new(i, ncm, seed)
        })
        .collect()
}

fn check_setup(cfg: &SimConfig, setup: &AgentSetup) -> Result<()> {
    setup.hp.validate()?;
    setup.reward.validate()?;
    if setup.hp.k != cfg.k {
        return Err(PetError::Config(format!(
            "learner k = {} but the monitor uses k = {}",
            setup.hp.k, cfg.k
        )));
    }
    if let Some(&c) = setup.masked.iter().find(|&&c| c >= crate::ncm::STATE_DIM) {
        return Err(PetError::Config(format!("masked component {c} out of range")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingRow {
    pub episode: usize,
    pub agent: usize,
    pub mean_reward: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_frac: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainingReport {
    pub rows: Vec<TrainingRow>,
    /// Mean over agents of each episode's mean reward.
    pub episode_rewards: Vec<f64>,
}

impl TrainingReport {
    pub const HEADER: &'static str = "episode,agent,mean_reward,policy_loss,value_loss,clip_frac";

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(Self::HEADER.split(','))?;
        for r in &self.rows {
            w.serialize((r.episode, r.agent, r.mean_reward, r.policy_loss, r.value_loss, r.clip_frac))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Whether the mean of the last `window` episode rewards is at least
    /// the mean of the first `window`.
    pub fn improved(&self, window: usize) -> Option<bool> {
        let r = &self.episode_rewards;
        if window == 0 || r.len() < window {
            return None;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some(mean(&r[r.len() - window..]) >= mean(&r[..window]))
    }
}

fn episode_rows(episode: usize, before: &[AgentStats], pool: &AgentPool) -> Vec<TrainingRow> {
    pool.agents
        .iter()
        .zip(before)
        .map(|(a, b)| {
            let n = a.stats.reward_count - b.reward_count;
            let new = &a.stats.updates[b.updates.len()..];
            let avg = |f: fn(&crate::learner::ppo::UpdateStats) -> f64| {
                if new.is_empty() {
                    f64::NAN
                } else {
                    new.iter().map(f).sum::<f64>() / new.len() as f64
                }
            };
            TrainingRow {
                episode,
                agent: a.port,
                mean_reward: if n == 0 {
                    f64::NAN
                } else {
                    (a.stats.reward_sum - b.reward_sum) / n as f64
                },
                policy_loss: avg(|u| u.policy_loss),
                value_loss: avg(|u| u.value_loss),
                clip_frac: avg(|u| u.clip_frac),
            }
        })
        .collect()
}

/// Replays one trace with the pool attached and returns the pool.
fn run_episode(cfg: SimConfig, pool: AgentPool, setup: &AgentSetup, flows: &[FlowSpec], limit_ns: u64) -> Result<AgentPool> {
    let mut sim = Simulation::new(
        cfg,
        EcnPolicy::Agents {
            pool: Box::new(pool),
            initial: setup.initial,
        },
    )?;
    sim.add_flows(flows.to_vec())?;
    sim.run_to_completion(SimTime(limit_ns))?;
    let mut pool = sim.take_pool().expect("pool attached");
    pool.end_episode();
    for a in &mut pool.agents {
        a.ncm.reset();
    }
    Ok(pool)
}

fn trace_limit(flows: &[FlowSpec], drain_ns: u64) -> u64 {
    flows.iter().map(|f| f.start_ns).max().unwrap_or(0) + drain_ns
}

/// Trains one shared model on the pooled experience of every port while
/// replaying `traces` round-robin, exploring at the fixed initial rate.
pub fn pretrain(
    cfg: &SimConfig,
    setup: &AgentSetup,
    traces: &[Vec<FlowSpec>],
    episodes: usize,
    drain_ns: u64,
) -> Result<(Vec<ModelState>, TrainingReport)> {
    check_setup(cfg, setup)?;
    if episodes > 0 && traces.is_empty() {
        return Err(PetError::Empty("trace list"));
    }
    let agents = build_agents(cfg, setup, cfg.seed);
    let learners = AgentPool::fresh_learners(&setup.hp, agents.len(), true, cfg.seed);
    let mut pool = AgentPool::new(agents, learners, AgentMode::OfflinePretrain, setup.hp.clone(), setup.reward)?;
    let mut report = TrainingReport::default();
    for ep in 0..episodes {
        let trace = &traces[ep % traces.len()];
        let mut ep_cfg = cfg.clone();
        ep_cfg.seed = stream_seed(cfg.seed, EPISODE_STREAM, ep as u64);
        ep_cfg.record_queue = false;
        ep_cfg.record_states = false;
        let before: Vec<AgentStats> = pool.agents.iter().map(|a| a.stats.clone()).collect();
        pool = run_episode(ep_cfg, pool, setup, trace, trace_limit(trace, drain_ns))?;
        let rows = episode_rows(ep, &before, &pool);
        let valid: Vec<f64> = rows.iter().map(|r| r.mean_reward).filter(|r| r.is_finite()).collect();
        let mean = if valid.is_empty() {
            f64::NAN
        } else {
            valid.iter().sum::<f64>() / valid.len() as f64
        };
        log::info!("pretrain episode {ep}: mean reward {mean:.4}");
        report.episode_rewards.push(mean);
        report.rows.extend(rows);
    }
    Ok((pool.models(), report))
}

/// File-level pretraining: reads traces, trains, writes the checkpoint.
pub fn pretrain_offline(
    trace_files: &[PathBuf],
    episodes: usize,
    out_checkpoint: &Path,
    cfg: &SimConfig,
    setup: &AgentSetup,
    drain_ns: u64,
) -> Result<TrainingReport> {
    let traces = trace_files.iter().map(|p| read_trace(p)).collect::<Result<Vec<_>>>()?;
    let (models, report) = pretrain(cfg, setup, &traces, episodes, drain_ns)?;
    checkpoint::save(out_checkpoint, &models)?;
    Ok(report)
}

/// Everything a finished run produced.
pub struct RunOutput {
    pub sim: Simulation,
    pub pool: Option<AgentPool>,
    pub duration_ns: u64,
}

impl RunOutput {
    pub fn models(&self) -> Vec<ModelState> {
        self.pool.as_ref().map(|p| p.models()).unwrap_or_default()
    }
}

/// Link transitions applied during a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkEvent {
    pub link: usize,
    pub up: bool,
    pub at_ns: u64,
}

/// Runs `flows` (all starting before `duration_ns`) under `policy`, then
/// lets the network drain for at most `drain_ns`.
pub fn run_policy(
    cfg: SimConfig,
    policy: EcnPolicy,
    flows: Vec<FlowSpec>,
    links: &[LinkEvent],
    duration_ns: u64,
    drain_ns: u64,
) -> Result<RunOutput> {
    let mut sim = Simulation::new(cfg, policy)?;
    sim.add_flows(flows.into_iter().filter(|f| f.start_ns < duration_ns).collect())?;
    for l in links {
        sim.set_link_state(l.link, l.up, SimTime(l.at_ns))?;
    }
    sim.run_until(SimTime(duration_ns))?;
    sim.run_to_completion(SimTime(duration_ns + drain_ns))?;
    let pool = sim.take_pool();
    Ok(RunOutput {
        sim,
        pool,
        duration_ns,
    })
}

/// Builds a per-port pool from checkpoint models (one model is copied to
/// every port).
pub fn pool_from_models(
    cfg: &SimConfig,
    setup: &AgentSetup,
    models: Vec<ModelState>,
    mode: AgentMode,
    seed: u64,
) -> Result<AgentPool> {
    check_setup(cfg, setup)?;
    let agents = build_agents(cfg, setup, seed);
    let learners: Learners = AgentPool::learners_from_models(models, agents.len(), false, &setup.hp, seed)?;
    AgentPool::new(agents, learners, mode, setup.hp.clone(), setup.reward)
}

/// Generator-driven run in which every port keeps training its own copy of
/// the checkpoint. The returned output carries the final per-port models.
#[allow(clippy::too_many_arguments)]
pub fn run_online(
    models: Vec<ModelState>,
    cfg: &SimConfig,
    setup: &AgentSetup,
    flows: Vec<FlowSpec>,
    links: &[LinkEvent],
    duration_ns: u64,
    drain_ns: u64,
    seed: u64,
) -> Result<RunOutput> {
    let pool = pool_from_models(cfg, setup, models, AgentMode::Online, seed)?;
    run_policy(
        cfg.clone(),
        EcnPolicy::Agents {
            pool: Box::new(pool),
            initial: setup.initial,
        },
        flows,
        links,
        duration_ns,
        drain_ns,
    )
}

/// Greedy evaluation with parameters frozen.
pub fn run_frozen(
    models: Vec<ModelState>,
    cfg: &SimConfig,
    setup: &AgentSetup,
    flows: Vec<FlowSpec>,
    links: &[LinkEvent],
    duration_ns: u64,
    drain_ns: u64,
) -> Result<RunOutput> {
    let pool = pool_from_models(cfg, setup, models, AgentMode::FrozenEval, cfg.seed)?;
    run_policy(
        cfg.clone(),
        EcnPolicy::Agents {
            pool: Box::new(pool),
            initial: setup.initial,
        },
        flows,
        links,
        duration_ns,
        drain_ns,
    )
}

/// Writes per-episode means as `episode,mean_reward`.
pub fn write_episode_means(report: &TrainingReport, path: &Path) -> Result<()> {
    let mut f = File::create(path)?;
    writeln!(f, "episode,mean_reward")?;
    for (i, r) in report.episode_rewards.iter().enumerate() {
        writeln!(f, "{i},{r}")?;
    }
    Ok(())
}
