//! Checks shared by the focused integration tests and the acceptance
//! harness. Each returns a one-line detail on success and on failure.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use pet_core::agent::training::run_policy;
use pet_core::agent::{compute_reward, IntervalStats, RewardSpec};
use pet_core::experiment::runner::{run_ablation, run_experiment, RunOptions};
use pet_core::experiment::{Bucket, JobSummary, Scenario};
use pet_core::learner::action::{action_to_ecn, exploration_epsilon, threshold_bytes, ActionIndex};
use pet_core::learner::checkpoint::{self, ModelState};
use pet_core::learner::mlp::MlpCache;
use pet_core::learner::policy::{action_log_prob, select_action, ActorCritic, SelectMode};
use pet_core::learner::ppo::{clip_binds, compute_gae, policy_loss, value_loss, Hyperparams, Learner, PpoSample};
use pet_core::ncm::{flow_ratio, incast_degree, ActiveFlow};
use pet_core::packet::Packet;
use pet_core::par::Parallelism;
use pet_core::queue::{mark_probability, EcnConfig, EnqueueOutcome, PortQueue};
use pet_core::sim::{EcnPolicy, SimConfig, Simulation, Topology, UNBOUNDED};
use pet_core::traffic::{generate_flows, FlowSpec, IncastSpec, WorkloadSchedule, WorkloadSpec};
use pet_core::transport::{classify_flow, FlowClass};
use pet_core::units::{SimTime, KB, MB, NS_PER_MS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

pub fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/scenarios").join(name)
}

pub fn load_scenario(name: &str) -> Scenario {
    Scenario::load(&scenario_path(name)).expect("bundled scenario parses")
}

// ---------------------------------------------------------------- 1

pub fn action_grid_exact() -> Check {
    for n in 0..=9u8 {
        ensure!(threshold_bytes(20, n) == (20u64 << n) * KB, "E({n}) wrong");
    }
    for n in 0..9u8 {
        let a = ActionIndex::new(n, 1, 19).unwrap();
        let c = action_to_ecn(a, 20);
        ensure!(c.k_min == (20u64 << n) * KB, "k_min for n={n}");
        ensure!(c.k_max == (20u64 << (n + 1)) * KB, "k_max for n={}", n + 1);
    }
    ensure!(ActionIndex::new(9, 1, 0).is_none(), "n_min = 9 must be unconstructible");
    Ok("E(n) = 20 * 2^n KB exact for n in 0..=9".into())
}

pub fn reward_exact() -> Check {
    let ws = RewardSpec::new(0.3, 0.7).unwrap();
    let dm = RewardSpec::new(0.7, 0.3).unwrap();
    let st = |tx: f64, bw: f64, q: f64| IntervalStats {
        tx_rate_bps: tx,
        link_bw_bps: bw,
        avg_qlen_packets: q,
    };
    let cases = [
        (ws, st(5e9, 10e9, 4.0), 0.3 * 0.5 + 0.7 * 0.25),
        (dm, st(5e9, 10e9, 4.0), 0.7 * 0.5 + 0.3 * 0.25),
        (ws, st(5e9, 10e9, 0.5), 0.3 * 0.5 + 0.7),
        (dm, st(0.0, 10e9, 0.0), 0.3),
        (ws, st(12e9, 10e9, 10.0), 0.3 + 0.07),
        (dm, st(40e9, 40e9, 1.0), 1.0),
        (ws, st(2.5e9, 25e9, 200.0), 0.03 + 0.0035),
    ];
    for (i, (spec, s, want)) in cases.iter().enumerate() {
        let got = compute_reward(spec, s);
        ensure!((got - want).abs() < 1e-12, "case {i}: got {got}, want {want}");
    }
    Ok(format!("{} hand-evaluated reward cases within 1e-12", cases.len()))
}

pub fn epsilon_exact() -> Check {
    let cases = [
        (0u64, 0.2),
        (50, 0.2),
        (51, 0.99f64.powf(51.0 / 50.0) * 0.2),
        (100, 0.99 * 0.99 * 0.2),
        (500, 0.99f64.powi(10) * 0.2),
    ];
    for (t, want) in cases {
        let got = exploration_epsilon(t, 0.2, 0.99, 50);
        ensure!((got - want).abs() < 1e-12, "t={t}: got {got}, want {want}");
    }
    ensure!((exploration_epsilon(100, 0.2, 0.99, 50) - 0.19602).abs() < 1e-12, "t=100 literal");
    Ok("epsilon schedule exact at t = 0, 50, 51, 100, 500".into())
}

// ---------------------------------------------------------------- 2

/// Direct double sum: A_t = sum_l (gamma*lambda)^l delta_{t+l}.
pub fn gae_direct(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let v = |i: usize| if i < n { values[i] } else { bootstrap };
    (0..n)
        .map(|t| {
            (t..n)
                .map(|l| (gamma * lambda).powi((l - t) as i32) * (rewards[l] + gamma * v(l + 1) - values[l]))
                .sum()
        })
        .collect()
}

pub fn gae_matches_direct_sum() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for trial in 0..400 {
        let n = 1 + trial % 16;
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b = rng.gen_range(-2.0..2.0);
        let gamma = rng.gen_range(0.0..=1.0);
        let lambda = rng.gen_range(0.0..=1.0);
        let (adv, ret) = compute_gae(&r, &v, b, gamma, lambda);
        let want = gae_direct(&r, &v, b, gamma, lambda);
        for t in 0..n {
            worst = worst.max((adv[t] - want[t]).abs());
            ensure!((ret[t] - adv[t] - v[t]).abs() < 1e-12, "returns != adv + value");
        }
    }
    let (a, _) = compute_gae(&[1.0, 1.0], &[0.5, 0.5], 0.0, 0.99, 0.95);
    ensure!((a[0] - 1.46525).abs() < 1e-12 && (a[1] - 0.5).abs() < 1e-12, "two-step example {a:?}");
    ensure!(worst < 1e-10, "max GAE error {worst:e}");
    Ok(format!("GAE vs direct sum, horizons 1..=16, max error {worst:.1e}"))
}

pub fn tiny_net(seed: u64) -> ActorCritic {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ActorCritic::new(6, &[7, 5], &mut rng)
}

fn random_batch(ac: &ActorCritic, n: usize, rng: &mut ChaCha8Rng, logp_shift: f64) -> Vec<PpoSample> {
    let mut cache = MlpCache::default();
    (0..n)
        .map(|_| {
            let state: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
            let n_min = rng.gen_range(0..9u8);
            let gap = rng.gen_range(1..=9 - n_min);
            let action = ActionIndex::new(n_min, gap, rng.gen_range(0..20)).unwrap();
            let logp = action_log_prob(ac, &state, &action, &mut cache);
            PpoSample {
                state,
                action,
                logp_old: logp + rng.gen_range(-logp_shift..=logp_shift),
                advantage: rng.gen_range(-1.0..1.0),
                ret: rng.gen_range(-1.0..1.0),
            }
        })
        .collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn gradients_match_finite_differences() -> Check {
    let mut ac = tiny_net(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // Random log-prob offsets stay far from the clip edges at 0.8 / 1.2.
    let batch = random_batch(&ac, 12, &mut rng, 0.05);
    let clip = 0.2;
    let h = 1e-5;

    let mut g = vec![0.0; ac.actor.params().len()];
    policy_loss(&ac, &batch, clip, Some(&mut g)).map_err(|e| e.to_string())?;
    let mut worst_pi: f64 = 0.0;
    for i in 0..g.len() {
        let p0 = ac.actor.params()[i];
        ac.actor.params_mut()[i] = p0 + h;
        let up = policy_loss(&ac, &batch, clip, None).unwrap().loss;
        ac.actor.params_mut()[i] = p0 - h;
        let dn = policy_loss(&ac, &batch, clip, None).unwrap().loss;
        ac.actor.params_mut()[i] = p0;
        worst_pi = worst_pi.max(rel_err(g[i], (up - dn) / (2.0 * h)));
    }

    let mut gv = vec![0.0; ac.critic.params().len()];
    value_loss(&ac, &batch, Some(&mut gv)).map_err(|e| e.to_string())?;
    let mut worst_v: f64 = 0.0;
    for i in 0..gv.len() {
        let p0 = ac.critic.params()[i];
        ac.critic.params_mut()[i] = p0 + h;
        let up = value_loss(&ac, &batch, None).unwrap();
        ac.critic.params_mut()[i] = p0 - h;
        let dn = value_loss(&ac, &batch, None).unwrap();
        ac.critic.params_mut()[i] = p0;
        worst_v = worst_v.max(rel_err(gv[i], (up - dn) / (2.0 * h)));
    }
    ensure!(
        worst_pi < 1e-4 && worst_v < 1e-4,
        "max relative error policy {worst_pi:e}, value {worst_v:e}"
    );
    Ok(format!("6-input net: max rel. error policy {worst_pi:.1e}, value {worst_v:.1e}"))
}

pub fn clip_binding_has_zero_gradient() -> Check {
    let ac = tiny_net(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut batch = random_batch(&ac, 40, &mut rng, 0.0);
    let mut bound = 0;
    for (i, s) in batch.iter_mut().enumerate() {
        // Ratio 2 with positive advantage, or ratio 0.5 with negative.
        if i % 2 == 0 {
            s.logp_old -= 2f64.ln();
            s.advantage = s.advantage.abs() + 0.1;
        } else {
            s.logp_old += 2f64.ln();
            s.advantage = -(s.advantage.abs() + 0.1);
        }
        let ratio = (action_log_prob(&ac, &s.state, &s.action, &mut MlpCache::default()) - s.logp_old).exp();
        ensure!(clip_binds(ratio, s.advantage, 0.2), "sample {i} does not bind");
        bound += 1;
    }
    let mut g = vec![0.0; ac.actor.params().len()];
    let stats = policy_loss(&ac, &batch, 0.2, Some(&mut g)).map_err(|e| e.to_string())?;
    ensure!(g.iter().all(|x| *x == 0.0), "non-zero gradient from clipped samples");
    ensure!(stats.clip_frac == 1.0, "clip fraction {}", stats.clip_frac);
    Ok(format!("{bound} clip-binding samples give an exactly zero gradient"))
}

// ---------------------------------------------------------------- 3

pub fn desk_flows(topo: &Topology, load: f64, ms: u64, seed: u64, incast: bool) -> Vec<FlowSpec> {
    let mut ws = WorkloadSpec::web_search(load).unwrap();
    if incast {
        ws.incast = Some(IncastSpec::default());
    }
    let sched = WorkloadSchedule::new(ws);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_flows(&mut rng, &sched, topo.host_count(), topo.host_rate_bps, SimTime::from_ms(ms)).unwrap()
}

pub fn conservation_and_lossless() -> Check {
    let mut details = Vec::new();
    // Finite buffers with heavy incast: drops are allowed, bytes must balance.
    let topo = Topology {
        buffer_bytes: 60 * KB,
        ..Topology::default()
    };
    let mut flows = desk_flows(&topo, 0.7, 15, 1, true);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for burst in 0..5u64 {
        flows.extend(
            pet_core::traffic::make_incast_burst(&mut rng, 24, 0, 256 * KB, SimTime::from_ms(2 + burst * 2), 32)
                .unwrap(),
        );
    }
    flows.sort_by_key(|f| f.start_ns);
    let cfg = SimConfig::new(topo, 1);
    let mut sim = Simulation::new(cfg, EcnPolicy::Static(EcnConfig::secn2(0.2))).unwrap();
    sim.add_flows(flows).unwrap();
    for step in 1..=20 {
        let s = sim.run_until(SimTime::from_ms(step)).map_err(|e| e.to_string())?;
        ensure!(s.conserved(), "bytes not conserved at {step} ms: {s:?}");
        ensure!(s.bytes_in_flight == sim.bytes_in_network(), "in-flight mismatch at {step} ms");
    }
    let s = sim.stats();
    details.push(format!("finite buffers: {} drops, conserved", s.packets_dropped));

    let inf = Topology {
        buffer_bytes: UNBOUNDED,
        ..Topology::default()
    };
    let flows = desk_flows(&inf, 0.6, 15, 3, true);
    let out = run_policy(
        SimConfig::new(inf, 3),
        EcnPolicy::Static(EcnConfig::secn2(0.2)),
        flows,
        &[],
        15 * NS_PER_MS,
        200 * NS_PER_MS,
    )
    .map_err(|e| e.to_string())?;
    let s = out.sim.stats();
    ensure!(s.conserved(), "infinite-buffer run not conserved");
    ensure!(s.packets_dropped == 0, "{} drops with infinite buffers", s.packets_dropped);
    ensure!(out.sim.unfinished_flows() == 0, "flows left unfinished");
    ensure!(s.ce_delivered == s.ece_sent && s.ece_sent == s.ece_received, "CE/ECE mismatch {s:?}");
    details.push(format!("infinite buffers: 0 drops over {} flows", s.flows_completed));
    Ok(details.join("; "))
}

/// Fraction of the bottleneck rate one long DCTCP flow achieves over the
/// second half of a 100 ms run.
pub fn single_flow_utilization() -> std::result::Result<f64, String> {
    let topo = Topology {
        n_spine: 1,
        n_leaf: 2,
        hosts_per_leaf: 1,
        ..Topology::default()
    };
    let cfg = SimConfig::new(topo, 1);
    let mut sim = Simulation::new(cfg, EcnPolicy::Static(EcnConfig::secn2(0.2))).map_err(|e| e.to_string())?;
    sim.add_flows(vec![FlowSpec {
        start_ns: 0,
        src: 0,
        dst: 1,
        size_bytes: 10_000 * MB,
    }])
    .map_err(|e| e.to_string())?;
    let port = topo.leaf_down_port(1);
    sim.run_until(SimTime::from_ms(50)).map_err(|e| e.to_string())?;
    let b0 = sim.queue(port).counters().tx_bytes;
    sim.run_until(SimTime::from_ms(100)).map_err(|e| e.to_string())?;
    let b1 = sim.queue(port).counters().tx_bytes;
    Ok((b1 - b0) as f64 * 8.0 / (0.05 * topo.host_rate_bps as f64))
}

pub fn utilization_check() -> Check {
    let u = single_flow_utilization()?;
    ensure!(u >= 0.9, "utilization {u:.3} < 0.9");
    Ok(format!("single flow at {:.1}% of the bottleneck", u * 100.0))
}

pub fn marking_frequency() -> Check {
    let cfg = EcnConfig::from_kb(20, 200, 0.5).unwrap();
    let n = 100_000u64;
    let mut worst: f64 = 0.0;
    for (i, q_kb) in [10u64, 21, 60, 110, 180, 199, 250].iter().enumerate() {
        let mut queue = PortQueue::new(400 * KB, cfg, 77 + i as u64);
        let size = 1000u32;
        let target = q_kb * KB;
        let mut seq = 0;
        let mut pkt = || {
            seq += 1;
            Packet::data(0, 0, 1, seq, size, 0)
        };
        while queue.qlen_bytes() + size as u64 <= target - size as u64 {
            queue.enqueue(pkt(), SimTime::ZERO);
        }
        let q_after = queue.qlen_bytes() + size as u64;
        let p = mark_probability(q_after, &cfg);
        let mut marked = 0u64;
        for _ in 0..n {
            if queue.enqueue(pkt(), SimTime::ZERO) == EnqueueOutcome::AcceptedMarked {
                marked += 1;
            }
            queue.dequeue(SimTime::ZERO);
        }
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        let freq = marked as f64 / n as f64;
        let dev = (freq - p).abs();
        ensure!(dev <= 3.0 * sigma + 1e-12, "qlen {q_after}: freq {freq} vs p {p} (3 sigma {})", 3.0 * sigma);
        if sigma > 0.0 {
            worst = worst.max(dev / sigma);
        }
    }
    Ok(format!("marking within 3 sigma at 7 pinned lengths (worst {worst:.2} sigma)"))
}

// ---------------------------------------------------------------- 4

pub fn incast_degree_brute_force() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..100 {
        let n = rng.gen_range(0..80);
        let flows: Vec<ActiveFlow> = (0..n)
            .map(|i| ActiveFlow {
                flow: i,
                src: rng.gen_range(0..32),
                dst: rng.gen_range(0..8),
                cumulative_bytes: rng.gen_range(1..3 * MB),
            })
            .collect();
        let mut best = 0u32;
        for dst in 0..32u16 {
            let mut senders = std::collections::BTreeSet::new();
            for f in &flows {
                if f.dst == dst {
                    senders.insert(f.src);
                }
            }
            best = best.max(senders.len() as u32);
        }
        ensure!(incast_degree(&flows) == best, "incast degree mismatch on {flows:?}");
    }
    Ok("incast degree equals brute force on 100 snapshots".into())
}

pub fn ratio_and_classification() -> Check {
    ensure!(classify_flow(MB) == FlowClass::Mouse, "exactly 1 MB must be a mouse");
    ensure!(classify_flow(MB + 1) == FlowClass::Elephant, "1 MB + 1 must be an elephant");
    for b in (MB - 2048)..=(MB + 2048) {
        let want = if b > MB { FlowClass::Elephant } else { FlowClass::Mouse };
        ensure!(classify_flow(b) == want, "classification at {b}");
    }
    let sizes = [1, MB - 1, MB, MB + 1, 5 * MB];
    // Every multiset of up to four sizes.
    let mut count = 0;
    for len in 0..=4usize {
        let mut idx = vec![0usize; len];
        loop {
            let flows: Vec<ActiveFlow> = idx
                .iter()
                .enumerate()
                .map(|(i, &k)| ActiveFlow {
                    flow: i as u32,
                    src: i as u16,
                    dst: 99,
                    cumulative_bytes: sizes[k],
                })
                .collect();
            let mice = idx.iter().filter(|&&k| sizes[k] <= MB).count();
            let want = if len == 0 { 0.5 } else { mice as f64 / len as f64 };
            ensure!(flow_ratio(&flows) == want, "ratio for {idx:?}");
            count += 1;
            let mut pos = len;
            loop {
                if pos == 0 {
                    break;
                }
                pos -= 1;
                idx[pos] += 1;
                if idx[pos] < sizes.len() {
                    break;
                }
                idx[pos] = 0;
                if pos == 0 {
                    pos = usize::MAX;
                    break;
                }
            }
            if pos == usize::MAX || len == 0 {
                break;
            }
        }
    }
    Ok(format!("classification boundary exact; flow ratio over {count} exhaustive snapshots"))
}

// ---------------------------------------------------------------- 5

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub pet_mean: f64,
    pub secn2_mean: f64,
    pub pet_p99_small: f64,
    pub secn2_p99_small: f64,
    pub pet_var: f64,
    pub secn2_var: f64,
}

impl SeedOutcome {
    pub fn fct_ok(&self) -> bool {
        self.pet_mean <= self.secn2_mean && self.pet_p99_small < self.secn2_p99_small
    }

    pub fn queue_ok(&self) -> bool {
        self.pet_var < self.secn2_var
    }
}

pub fn seed_outcomes(summaries: &[JobSummary]) -> Vec<SeedOutcome> {
    let mut seeds: Vec<u64> = summaries.iter().map(|s| s.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    seeds
        .into_iter()
        .map(|seed| {
            let get = |scheme: &str| summaries.iter().find(|s| s.seed == seed && s.scheme == scheme).unwrap();
            let (p, b) = (get("pet"), get("secn2"));
            let nan = f64::NAN;
            SeedOutcome {
                seed,
                pet_mean: p.bucket(Bucket::All).mean_norm.unwrap_or(nan),
                secn2_mean: b.bucket(Bucket::All).mean_norm.unwrap_or(nan),
                pet_p99_small: p.bucket(Bucket::Small).p99_norm.unwrap_or(nan),
                secn2_p99_small: b.bucket(Bucket::Small).p99_norm.unwrap_or(nan),
                pet_var: p.queue.map(|q| q.var_kb2).unwrap_or(nan),
                secn2_var: b.queue.map(|q| q.var_kb2).unwrap_or(nan),
            }
        })
        .collect()
}

/// Returns (FCT check, queue check).
pub fn training_efficacy(out: &Path) -> (Check, Check) {
    let sc = load_scenario("acceptance_training.toml");
    let opts = RunOptions {
        out: out.to_path_buf(),
        seed_offset: 0,
        parallelism: Parallelism::available(),
    };
    let summaries = match run_experiment(&sc, &opts) {
        Ok(s) => s,
        Err(e) => return (Err(e.to_string()), Err(e.to_string())),
    };
    let outcomes = seed_outcomes(&summaries);
    for o in &outcomes {
        println!(
            "  seed {}: mean norm FCT pet {:.3} secn2 {:.3} | mice p99 pet {:.3} secn2 {:.3} | queue var pet {:.1} secn2 {:.1} KB^2",
            o.seed, o.pet_mean, o.secn2_mean, o.pet_p99_small, o.secn2_p99_small, o.pet_var, o.secn2_var
        );
    }
    let n = outcomes.len();
    let fct = outcomes.iter().filter(|o| o.fct_ok()).count();
    let q = outcomes.iter().filter(|o| o.queue_ok()).count();
    let fct_msg = format!("PET mean <= SECN2 and mice p99 < SECN2 in {fct} of {n} seeds");
    let q_msg = format!("PET queue variance < SECN2 in {q} of {n} seeds");
    (
        if fct >= 4 { Ok(fct_msg) } else { Err(fct_msg) },
        if q >= 4 { Ok(q_msg) } else { Err(q_msg) },
    )
}

// ---------------------------------------------------------------- 6

pub fn identical_runs_identical_csvs(dir: &Path) -> Check {
    let sc = load_scenario("determinism.toml");
    let a = dir.join("a");
    let b = dir.join("b");
    let mut oa = RunOptions::new(&a);
    oa.parallelism = Parallelism::available();
    let mut ob = RunOptions::new(&b);
    ob.parallelism = Parallelism::Sequential;
    let sa = run_experiment(&sc, &oa).map_err(|e| e.to_string())?;
    let sb = run_experiment(&sc, &ob).map_err(|e| e.to_string())?;
    let mut files = 0;
    for entry in walkdir::WalkDir::new(&a) {
        let entry = entry.map_err(|e| e.to_string())?;
        let name = entry.file_name().to_string_lossy();
        if name.ends_with(".csv") {
            let rel = entry.path().strip_prefix(&a).unwrap();
            let x = std::fs::read(entry.path()).map_err(|e| e.to_string())?;
            let y = std::fs::read(b.join(rel)).map_err(|e| e.to_string())?;
            ensure!(x == y, "{} differs between runs", rel.display());
            files += 1;
        }
    }
    for (x, y) in sa.iter().zip(&sb) {
        ensure!(x.stats.trace_hash == y.stats.trace_hash, "trace hash differs for {}", x.scheme);
    }
    ensure!(files >= 6, "only {files} CSVs compared");
    Ok(format!("{files} CSVs byte-identical across two runs"))
}

pub fn checkpoint_greedy_round_trip(dir: &Path) -> Check {
    let hp = Hyperparams::default();
    let mut learner = Learner::new(hp.clone(), 11);
    // Perturb the weights so the greedy choice is not trivially uniform.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for p in learner.ac.actor.params_mut() {
        *p += rng.gen_range(-0.3..0.3);
    }
    learner.updates = 77;
    let path = dir.join("model.ckpt");
    checkpoint::save(&path, &[ModelState::from_learner(&learner)]).map_err(|e| e.to_string())?;
    let restored = checkpoint::load(&path)
        .map_err(|e| e.to_string())?
        .remove(0)
        .into_learner(hp.clone(), 99)
        .map_err(|e| e.to_string())?;
    ensure!(restored.updates == 77, "update count lost");
    let mut cache = MlpCache::default();
    let mut distinct = std::collections::HashSet::new();
    for i in 0..100 {
        let state: Vec<f64> = (0..hp.input_dim()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut r1 = ChaCha8Rng::seed_from_u64(i);
        let mut r2 = ChaCha8Rng::seed_from_u64(i + 1000);
        let a = select_action(&learner.ac, &state, SelectMode::Greedy, &mut r1, &mut cache).map_err(|e| e.to_string())?;
        let b = select_action(&restored.ac, &state, SelectMode::Greedy, &mut r2, &mut cache).map_err(|e| e.to_string())?;
        ensure!(a == b, "greedy choice differs on state {i}");
        distinct.insert(a.action);
    }
    Ok(format!("100 greedy actions identical after save/load ({} distinct)", distinct.len()))
}

// ---------------------------------------------------------------- 7

pub fn scenario_machinery(dir: &Path) -> Check {
    let mut notes = Vec::new();

    let sw = load_scenario("workload_switch.toml");
    let summaries = run_experiment(&sw, &RunOptions::new(dir.join("switch"))).map_err(|e| e.to_string())?;
    for s in &summaries {
        ensure!(s.regimes.len() == 4, "{}: {} regimes", s.scheme, s.regimes.len());
        let total: usize = s.regimes.iter().map(|r| r.fct[3].count).sum();
        ensure!(total == s.bucket(Bucket::All).count, "{}: regime counts do not add up", s.scheme);
        ensure!(s.stats.conserved(), "{}: not conserved", s.scheme);
    }
    notes.push(format!("switch: {} runs x 4 regimes", summaries.len()));

    let fail = load_scenario("link_failure.toml");
    let (_, down, up) = fail.failures.unwrap();
    let summaries = run_experiment(&fail, &RunOptions::new(dir.join("failure"))).map_err(|e| e.to_string())?;
    for s in &summaries {
        ensure!(s.regimes.len() == 3, "{}: {} regimes", s.scheme, s.regimes.len());
        ensure!(!s.failed_links.is_empty(), "no link failed");
        ensure!(s.stats.conserved(), "{}: not conserved", s.scheme);
        if let (Some(a), Some(b)) = (s.drops.first_ns, s.drops.last_ns) {
            ensure!(a >= down && b <= up, "{}: drops at [{a}, {b}] outside [{down}, {up}]", s.scheme);
        }
        notes.push(format!(
            "{}: {} drops inside the failure window",
            s.scheme,
            s.drops.overflow + s.drops.link_down + s.drops.no_route
        ));
    }
    Ok(notes.join("; "))
}

// ---------------------------------------------------------------- 8

pub fn ablation_report(dir: &Path) -> Check {
    let sc = load_scenario("ablation.toml");
    let rows = run_ablation(&sc, &RunOptions::new(dir)).map_err(|e| e.to_string())?;
    ensure!(dir.join("ablation.csv").exists(), "ablation.csv missing");
    ensure!(rows.len() == 4 * sc.file.seeds.len(), "{} rows", rows.len());
    let summary: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{} {}",
                r.variant,
                r.vs_full.map(|v| format!("{:+.1}%", v * 100.0)).unwrap_or("-".into())
            )
        })
        .collect();
    Ok(format!("report written ({})", summary.join(", ")))
}
