//! GAE, clipped-surrogate and value losses, and the per-agent PPO learner.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::action::ActionIndex;
use super::adam::Adam;
use super::mlp::MlpCache;
use super::policy::{ActorCritic, HeadDists};
use crate::error::{PetError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub epochs: usize,
    pub rollout_len: usize,
    pub minibatch: usize,
    /// Initial exploration-mixing probability.
    pub eps0: f64,
    pub decay_rate: f64,
    pub decay_step: u64,
    /// Threshold grid scale in KB.
    pub alpha_scale_kb: u64,
    pub hidden: Vec<usize>,
    /// Slots per state sequence.
    pub k: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            lr_actor: 4e-4,
            lr_critic: 1e-3,
            epochs: 4,
            rollout_len: 128,
            minibatch: 32,
            eps0: 0.2,
            decay_rate: 0.99,
            decay_step: 50,
            alpha_scale_kb: 20,
            hidden: vec![64, 64],
            k: 8,
        }
    }
}

impl Hyperparams {
    /// Alternative preset reading the published GAE coefficient (0.01) as lambda.
    pub fn low_lambda() -> Self {
        Hyperparams {
            lambda: 0.01,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.gamma) || !unit(self.lambda) {
            return Err(PetError::Config("gamma and lambda must lie in [0, 1]".into()));
        }
        if !(self.clip > 0.0) || !(self.lr_actor > 0.0) || !(self.lr_critic > 0.0) {
            return Err(PetError::Config("clip and learning rates must be positive".into()));
        }
        if self.rollout_len == 0 || self.minibatch == 0 || self.k == 0 {
            return Err(PetError::Config("rollout_len, minibatch and k must be >= 1".into()));
        }
        if !unit(self.eps0) || !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) || self.decay_step == 0 {
            return Err(PetError::Config("invalid exploration schedule".into()));
        }
        if self.alpha_scale_kb == 0 {
            return Err(PetError::Config("alpha_scale_kb must be positive".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.k * crate::ncm::STATE_DIM
    }
}

/// Advantages by backward recursion over TD residuals; `dones[t]` cuts the
/// bootstrap from step `t + 1`. Returns `(advantages, returns)`.
pub fn compute_gae_with_dones(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert_eq!(values.len(), n);
    assert_eq!(dones.len(), n);
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { bootstrap_value };
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    bootstrap_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    compute_gae_with_dones(rewards, values, &vec![false; rewards.len()], bootstrap_value, gamma, lambda)
}

/// `min(r * A, clip(r, 1 - eps, 1 + eps) * A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip, 1.0 + clip) * advantage)
}

/// True when the clipped branch is the minimum, so the sample contributes
/// no gradient.
pub fn clip_binds(ratio: f64, advantage: f64, clip: f64) -> bool {
    (advantage > 0.0 && ratio > 1.0 + clip) || (advantage < 0.0 && ratio < 1.0 - clip)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoSample {
    pub state: Vec<f64>,
    pub action: ActionIndex,
    pub logp_old: f64,
    pub advantage: f64,
    pub ret: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PolicyLossStats {
    pub loss: f64,
    pub clip_frac: f64,
    pub entropy: f64,
}

/// Negative mean clipped surrogate; when `grad` is given, accumulates its
/// gradient w.r.t. the actor parameters.
pub fn policy_loss(
    ac: &ActorCritic,
    batch: &[PpoSample],
    clip: f64,
    mut grad: Option<&mut [f64]>,
) -> Result<PolicyLossStats> {
    if batch.is_empty() {
        return Err(PetError::Empty("policy loss batch"));
    }
    let inv = 1.0 / batch.len() as f64;
    let mut cache = MlpCache::default();
    let mut dlogits = vec![0.0; super::action::ACTION_LOGITS];
    let mut stats = PolicyLossStats::default();
    let mut clipped = 0usize;
    for s in batch {
        let logits = ac.actor.forward(&s.state, &mut cache);
        let d = HeadDists::new(logits, s.action.n_min() as usize);
        let logp = d.log_prob(&s.action);
        let ratio = (logp - s.logp_old).exp();
        if !ratio.is_finite() {
            return Err(PetError::Numerical(format!(
                "non-finite probability ratio (logp {logp}, old {})",
                s.logp_old
            )));
        }
        stats.loss -= clipped_surrogate(ratio, s.advantage, clip) * inv;
        stats.entropy += d.entropy() * inv;
        let binds = clip_binds(ratio, s.advantage, clip);
        if binds {
            clipped += 1;
        }
        if let Some(g) = grad.as_deref_mut() {
            if !binds {
                let coeff = -ratio * s.advantage * inv;
                d.grad_log_prob(&s.action, &mut dlogits);
                for x in dlogits.iter_mut() {
                    *x *= coeff;
                }
                ac.actor.backward(&cache, &dlogits, g);
            }
        }
    }
    stats.clip_frac = clipped as f64 * inv;
    Ok(stats)
}

/// Mean squared error between critic outputs and returns.
pub fn value_loss(ac: &ActorCritic, batch: &[PpoSample], mut grad: Option<&mut [f64]>) -> Result<f64> {
    if batch.is_empty() {
        return Err(PetError::Empty("value loss batch"));
    }
    let inv = 1.0 / batch.len() as f64;
    let mut cache = MlpCache::default();
    let mut loss = 0.0;
    for s in batch {
        let v = ac.critic.forward(&s.state, &mut cache)[0];
        let err = v - s.ret;
        loss += err * err * inv;
        if let Some(g) = grad.as_deref_mut() {
            ac.critic.backward(&cache, &[2.0 * err * inv], g);
        }
    }
    Ok(loss)
}

/// One step of agent experience.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state_seq: Vec<f64>,
    pub action: ActionIndex,
    pub reward: f64,
    pub logp: f64,
    pub value: f64,
    pub done: bool,
}

#[derive(Debug, Clone, Default)]
pub struct RolloutBuffer {
    transitions: Vec<Transition>,
}

impl RolloutBuffer {
    pub fn push(&mut self, t: Transition) {
        debug_assert!(t.logp <= 0.0 && t.value.is_finite());
        self.transitions.push(t);
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn mark_last_done(&mut self) {
        if let Some(t) = self.transitions.last_mut() {
            t.done = true;
        }
    }

    pub fn clear(&mut self) {
        self.transitions.clear();
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    /// Runs GAE over the stored trajectory and drains it into PPO samples.
    pub fn drain_samples(&mut self, bootstrap_value: f64, gamma: f64, lambda: f64) -> Vec<PpoSample> {
        let rewards: Vec<f64> = self.transitions.iter().map(|t| t.reward).collect();
        let values: Vec<f64> = self.transitions.iter().map(|t| t.value).collect();
        let dones: Vec<bool> = self.transitions.iter().map(|t| t.done).collect();
        let (adv, ret) = compute_gae_with_dones(&rewards, &values, &dones, bootstrap_value, gamma, lambda);
        self.transitions
            .drain(..)
            .zip(adv.into_iter().zip(ret))
            .map(|(t, (a, r))| PpoSample {
                state: t.state_seq,
                action: t.action,
                logp_old: t.logp,
                advantage: a,
                ret: r,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_frac: f64,
    pub samples: usize,
}

/// Zero mean, unit variance (sigma floored at 1e-8).
pub fn normalize_advantages(samples: &mut [PpoSample]) {
    if samples.is_empty() {
        return;
    }
    let n = samples.len() as f64;
    let mean = samples.iter().map(|s| s.advantage).sum::<f64>() / n;
    let var = samples.iter().map(|s| (s.advantage - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-8);
    for s in samples {
        s.advantage = (s.advantage - mean) / sd;
    }
}

/// Independent PPO learner owned by exactly one agent (or one shared
/// pretraining model).
#[derive(Debug, Clone)]
pub struct Learner {
    pub ac: ActorCritic,
    pub adam_actor: Adam,
    pub adam_critic: Adam,
    pub hp: Hyperparams,
    /// PPO updates performed so far; drives the exploration schedule.
    pub updates: u64,
    rng: ChaCha8Rng,
}

impl Learner {
    pub fn new(hp: Hyperparams, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ac = ActorCritic::new(hp.input_dim(), &hp.hidden, &mut rng);
        Self::from_parts(ac, hp, seed)
    }

    pub fn from_parts(ac: ActorCritic, hp: Hyperparams, seed: u64) -> Self {
        let adam_actor = Adam::new(ac.actor.params().len(), hp.lr_actor);
        let adam_critic = Adam::new(ac.critic.params().len(), hp.lr_critic);
        Learner {
            ac,
            adam_actor,
            adam_critic,
            hp,
            updates: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x005E_ED0F_1EA7),
        }
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005E_ED0F_1EA7);
    }

    pub fn epsilon(&self) -> f64 {
        super::action::exploration_epsilon(self.updates, self.hp.eps0, self.hp.decay_rate, self.hp.decay_step)
    }

    /// N epochs of minibatch Adam on the policy loss, then N epochs on the
    /// value loss. Stored log-probabilities serve as the old policy.
    pub fn ppo_update(&mut self, mut samples: Vec<PpoSample>) -> Result<UpdateStats> {
        if samples.is_empty() {
            return Err(PetError::Empty("rollout buffer"));
        }
        normalize_advantages(&mut samples);
        let mb = self.hp.minibatch.max(1);
        let mut idx: Vec<usize> = (0..samples.len()).collect();
        let mut stats = UpdateStats {
            samples: samples.len(),
            ..Default::default()
        };
        let mut batches = 0usize;
        let mut grad = vec![0.0; self.ac.actor.params().len()];
        let mut chunk_buf: Vec<PpoSample> = Vec::with_capacity(mb);
        for _ in 0..self.hp.epochs {
            idx.shuffle(&mut self.rng);
            for chunk in idx.chunks(mb) {
                chunk_buf.clear();
                chunk_buf.extend(chunk.iter().map(|&i| samples[i].clone()));
                grad.iter_mut().for_each(|g| *g = 0.0);
                let s = policy_loss(&self.ac, &chunk_buf, self.hp.clip, Some(&mut grad))?;
                self.adam_actor.update(self.ac.actor.params_mut(), &grad);
                stats.policy_loss += s.loss;
                stats.entropy += s.entropy;
                stats.clip_frac += s.clip_frac;
                batches += 1;
            }
        }
        if batches > 0 {
            stats.policy_loss /= batches as f64;
            stats.entropy /= batches as f64;
            stats.clip_frac /= batches as f64;
        }
        let mut vgrad = vec![0.0; self.ac.critic.params().len()];
        let mut vbatches = 0usize;
        for _ in 0..self.hp.epochs {
            idx.shuffle(&mut self.rng);
            for chunk in idx.chunks(mb) {
                chunk_buf.clear();
                chunk_buf.extend(chunk.iter().map(|&i| samples[i].clone()));
                vgrad.iter_mut().for_each(|g| *g = 0.0);
                stats.value_loss += value_loss(&self.ac, &chunk_buf, Some(&mut vgrad))?;
                self.adam_critic.update(self.ac.critic.params_mut(), &vgrad);
                vbatches += 1;
            }
        }
        if vbatches > 0 {
            stats.value_loss /= vbatches as f64;
        }
        if self.ac.actor.params().iter().chain(self.ac.critic.params()).any(|p| !p.is_finite()) {
            return Err(PetError::Numerical("non-finite parameters after update".into()));
        }
        self.updates += 1;
        Ok(stats)
    }
}
