//! Actor-critic networks over the factored ECN action space.

use rand::Rng;

use super::action::{gap_legal, n_min_legal, ActionIndex, ACTION_LOGITS};
use super::mlp::{Mlp, MlpCache};
use crate::error::{PetError, Result};

const HEAD_OFFSETS: [usize; 3] = [0, 10, 19];

/// Actor (shared trunk, three categorical heads packed into one output
/// layer) and a separate critic with the same trunk shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorCritic {
    pub actor: Mlp,
    pub critic: Mlp,
}

impl ActorCritic {
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut actor_sizes = vec![input];
        actor_sizes.extend_from_slice(hidden);
        let mut critic_sizes = actor_sizes.clone();
        actor_sizes.push(ACTION_LOGITS);
        critic_sizes.push(1);
        ActorCritic {
            actor: Mlp::new(&actor_sizes, 0.01, rng),
            critic: Mlp::new(&critic_sizes, 1.0, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn value(&self, state: &[f64], cache: &mut MlpCache) -> f64 {
        self.critic.forward(state, cache)[0]
    }
}

/// Log-softmax over the legal entries; illegal entries get `-inf`.
fn masked_log_softmax(logits: &[f64], legal: impl Fn(usize) -> bool, out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for (i, &z) in logits.iter().enumerate() {
        if legal(i) && z > max {
            max = z;
        }
    }
    let mut sum = 0.0;
    for (i, &z) in logits.iter().enumerate() {
        if legal(i) {
            sum += (z - max).exp();
        }
    }
    let lse = max + sum.ln();
    for (i, &z) in logits.iter().enumerate() {
        out[i] = if legal(i) { z - lse } else { f64::NEG_INFINITY };
    }
}

/// Per-head log-probabilities for one state. The gap head is conditioned
/// on the chosen K_min exponent.
#[derive(Debug, Clone)]
pub struct HeadDists {
    pub n_min: [f64; 10],
    pub gap: [f64; 9],
    pub p: [f64; 20],
}

impl HeadDists {
    pub fn new(logits: &[f64], n_min_choice: usize) -> Self {
        let mut d = HeadDists {
            n_min: [0.0; 10],
            gap: [0.0; 9],
            p: [0.0; 20],
        };
        masked_log_softmax(&logits[0..10], n_min_legal, &mut d.n_min);
        d.set_gap(logits, n_min_choice);
        masked_log_softmax(&logits[19..39], |_| true, &mut d.p);
        d
    }

    pub fn set_gap(&mut self, logits: &[f64], n_min_choice: usize) {
        masked_log_softmax(&logits[10..19], |g| gap_legal(n_min_choice, g), &mut self.gap);
    }

    pub fn log_prob(&self, a: &ActionIndex) -> f64 {
        let [n, g, p] = a.head_indices();
        self.n_min[n] + self.gap[g] + self.p[p]
    }

    pub fn entropy(&self) -> f64 {
        fn h(lp: &[f64]) -> f64 {
            lp.iter()
                .filter(|l| l.is_finite())
                .map(|&l| -l.exp() * l)
                .sum()
        }
        h(&self.n_min) + h(&self.gap) + h(&self.p)
    }

    /// d log pi(a) / d logits, written into `out` (length 39).
    pub fn grad_log_prob(&self, a: &ActionIndex, out: &mut [f64]) {
        let chosen = a.head_indices();
        let heads: [&[f64]; 3] = [&self.n_min, &self.gap, &self.p];
        for (h, lp) in heads.iter().enumerate() {
            let off = HEAD_OFFSETS[h];
            for (i, &l) in lp.iter().enumerate() {
                let pi = if l.is_finite() { l.exp() } else { 0.0 };
                out[off + i] = if i == chosen[h] { 1.0 - pi } else { -pi };
            }
        }
    }
}

fn argmax(lp: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in lp.iter().enumerate() {
        if l > lp[best] {
            best = i;
        }
    }
    best
}

fn sample_categorical<R: Rng + ?Sized>(lp: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_legal = 0;
    for (i, &l) in lp.iter().enumerate() {
        if l.is_finite() {
            acc += l.exp();
            last_legal = i;
            if u < acc {
                return i;
            }
        }
    }
    last_legal
}

fn uniform_legal<R: Rng + ?Sized>(lp: &[f64], rng: &mut R) -> usize {
    let legal: Vec<usize> = (0..lp.len()).filter(|&i| lp[i].is_finite()).collect();
    legal[rng.gen_range(0..legal.len())]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionChoice {
    pub action: ActionIndex,
    /// Policy log-probability of the chosen composite action.
    pub logp: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SelectMode {
    /// Argmax of every head.
    Greedy,
    /// With probability `eps` every head is drawn uniformly over its legal
    /// entries, otherwise each head is sampled from the policy.
    Explore { eps: f64 },
}

/// Picks an action for `state`. The returned log-probability is always the
/// policy's, whichever way the action was drawn.
pub fn select_action<R: Rng + ?Sized>(
    ac: &ActorCritic,
    state: &[f64],
    mode: SelectMode,
    rng: &mut R,
    cache: &mut MlpCache,
) -> Result<ActionChoice> {
    let logits = ac.actor.forward(state, cache).to_vec();
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(PetError::Numerical("non-finite actor output".into()));
    }
    let mut d = HeadDists::new(&logits, 0);
    let idx = match mode {
        SelectMode::Greedy => {
            let n = argmax(&d.n_min);
            d.set_gap(&logits, n);
            [n, argmax(&d.gap), argmax(&d.p)]
        }
        SelectMode::Explore { eps } => {
            let explore = eps > 0.0 && rng.gen::<f64>() < eps;
            let pick = |lp: &[f64], rng: &mut R| {
                if explore {
                    uniform_legal(lp, rng)
                } else {
                    sample_categorical(lp, rng)
                }
            };
            let n = pick(&d.n_min, rng);
            d.set_gap(&logits, n);
            let g = pick(&d.gap, rng);
            let p = pick(&d.p, rng);
            [n, g, p]
        }
    };
    let action = ActionIndex::from_head_indices(idx)
        .ok_or_else(|| PetError::Numerical(format!("illegal action {idx:?} selected")))?;
    let logp = d.log_prob(&action);
    let value = ac.value(state, cache);
    if !logp.is_finite() || !value.is_finite() {
        return Err(PetError::Numerical("non-finite log-prob or value".into()));
    }
    Ok(ActionChoice {
        action,
        logp,
        value,
    })
}

/// Log-probability of `action` under the current actor.
pub fn action_log_prob(ac: &ActorCritic, state: &[f64], action: &ActionIndex, cache: &mut MlpCache) -> f64 {
    let logits = ac.actor.forward(state, cache);
    HeadDists::new(logits, action.n_min() as usize).log_prob(action)
}
