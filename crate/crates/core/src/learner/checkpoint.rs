//! Binary checkpoint format.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic          4 bytes  "PETC"
//! version        u32      = 1
//! model_count    u32
//! per model:
//!   actor_layers   u32, then that many u32 layer sizes (input .. output)
//!   critic_layers  u32, then that many u32 layer sizes
//!   updates        u64      PPO updates performed
//!   actor_step     u64      Adam step counter (actor)
//!   critic_step    u64      Adam step counter (critic)
//!   actor weights  f64 x P_a   per layer: W row-major [out][in], then bias
//!   critic weights f64 x P_c
//!   actor  Adam m  f64 x P_a,  actor  Adam v  f64 x P_a
//!   critic Adam m  f64 x P_c,  critic Adam v  f64 x P_c
//! ```
//!
//! A file holding one model is broadcast to every port on load; a file
//! holding one model per port restores each port's own learner.

use std::io::{Read, Write};
use std::path::Path;

use super::adam::Adam;
use super::mlp::{param_count, Mlp};
use super::policy::ActorCritic;
use super::ppo::{Hyperparams, Learner};
use crate::error::{PetError, Result};

pub const MAGIC: &[u8; 4] = b"PETC";
pub const VERSION: u32 = 1;

/// Weights and optimizer state of one learner, without its RNG.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub ac: ActorCritic,
    pub adam_actor: Adam,
    pub adam_critic: Adam,
    pub updates: u64,
}

impl ModelState {
    /// Learning rates are configuration, not state, and are not captured.
    pub fn from_learner(l: &Learner) -> Self {
        let mut adam_actor = l.adam_actor.clone();
        let mut adam_critic = l.adam_critic.clone();
        adam_actor.lr = 0.0;
        adam_critic.lr = 0.0;
        ModelState {
            ac: l.ac.clone(),
            adam_actor,
            adam_critic,
            updates: l.updates,
        }
    }

    /// Rebuilds a learner; the network shape must match `hp`.
    pub fn into_learner(self, hp: Hyperparams, seed: u64) -> Result<Learner> {
        let mut expected = vec![hp.input_dim()];
        expected.extend_from_slice(&hp.hidden);
        let actor_trunk = &self.ac.actor.sizes()[..self.ac.actor.sizes().len() - 1];
        if actor_trunk != expected.as_slice() {
            return Err(PetError::Checkpoint(format!(
                "network shape {:?} does not match configured {:?}",
                actor_trunk, expected
            )));
        }
        let mut l = Learner::from_parts(self.ac, hp.clone(), seed);
        l.adam_actor = self.adam_actor;
        l.adam_critic = self.adam_critic;
        l.adam_actor.lr = hp.lr_actor;
        l.adam_critic.lr = hp.lr_critic;
        l.updates = self.updates;
        Ok(l)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(models: &[ModelState]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, models.len() as u32);
    for m in models {
        for net in [&m.ac.actor, &m.ac.critic] {
            put_u32(&mut out, net.sizes().len() as u32);
            for &s in net.sizes() {
                put_u32(&mut out, s as u32);
            }
        }
        put_u64(&mut out, m.updates);
        put_u64(&mut out, m.adam_actor.step);
        put_u64(&mut out, m.adam_critic.step);
        put_f64s(&mut out, m.ac.actor.params());
        put_f64s(&mut out, m.ac.critic.params());
        put_f64s(&mut out, &m.adam_actor.m);
        put_f64s(&mut out, &m.adam_actor.v);
        put_f64s(&mut out, &m.adam_critic.m);
        put_f64s(&mut out, &m.adam_critic.v);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(PetError::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn sizes(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()? as usize;
        if !(2..=64).contains(&n) {
            return Err(PetError::Checkpoint(format!("bad layer count {n}")));
        }
        let sizes = (0..n).map(|_| self.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        if sizes.iter().any(|&s| s == 0 || s > 1 << 20) {
            return Err(PetError::Checkpoint(format!("bad layer sizes {sizes:?}")));
        }
        Ok(sizes)
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<ModelState>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(PetError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(PetError::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let count = r.u32()? as usize;
    let mut models = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let actor_sizes = r.sizes()?;
        let critic_sizes = r.sizes()?;
        let updates = r.u64()?;
        let actor_step = r.u64()?;
        let critic_step = r.u64()?;
        let pa = param_count(&actor_sizes);
        let pc = param_count(&critic_sizes);
        let actor = Mlp::from_parts(actor_sizes, r.f64s(pa)?).unwrap();
        let critic = Mlp::from_parts(critic_sizes, r.f64s(pc)?).unwrap();
        let mut adam_actor = Adam::new(pa, 0.0);
        adam_actor.m = r.f64s(pa)?;
        adam_actor.v = r.f64s(pa)?;
        adam_actor.step = actor_step;
        let mut adam_critic = Adam::new(pc, 0.0);
        adam_critic.m = r.f64s(pc)?;
        adam_critic.v = r.f64s(pc)?;
        adam_critic.step = critic_step;
        models.push(ModelState {
            ac: ActorCritic { actor, critic },
            adam_actor,
            adam_critic,
            updates,
        });
    }
    if r.pos != buf.len() {
        return Err(PetError::Checkpoint(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }
    Ok(models)
}

pub fn save(path: &Path, models: &[ModelState]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode(models))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<ModelState>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode(&buf)
}
