//! Job fan-out, the PET training pipeline and on-disk metric bundles.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::{PetEval, Scenario, Scheme};
use super::metrics::{
    read_fct_csv, read_queue_csv, relative_change, summarize_fct, summarize_queue, summarize_regimes, write_fct_csv,
    write_queue_csv, write_states_csv, Bucket, FctStats, QueueSummary, RegimeSummary,
};
use crate::agent::training::{pretrain, run_frozen, run_online, run_policy, AgentSetup, LinkEvent, RunOutput, TrainingReport};
use crate::error::{PetError, Result};
use crate::learner::checkpoint::{self, ModelState};
use crate::ncm::{IDX_INCAST, IDX_RATIO};
use crate::par::{self, Parallelism};
use crate::sim::{DropCause, EcnPolicy, SimConfig, SimStats};
use crate::traffic::{generate_flows, FlowSpec, WorkloadSchedule};
use crate::units::{stream_seed, SimTime, NS_PER_MS};

const TRAFFIC_STREAM: u64 = 0x7AFF;
const PRETRAIN_STREAM: u64 = 0x9E7A;
const WARMUP_STREAM: u64 = 0x3A12;
const FAILURE_STREAM: u64 = 0xFA11;
const PRETRAIN_DRAIN_NS: u64 = 10 * NS_PER_MS;

pub const PARTIAL_MARKER: &str = "PARTIAL";
pub const NORMALIZATION: &str =
    "norm_fct = fct / (size * 8 / bottleneck_rate + base_rtt), bottleneck and base RTT of the unloaded path";

pub fn git_describe() -> &'static str {
    option_env!("PET_GIT_DESCRIBE").unwrap_or("unknown")
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out: PathBuf,
    pub seed_offset: u64,
    pub parallelism: Parallelism,
}

impl RunOptions {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        RunOptions {
            out: out.into(),
            seed_offset: 0,
            parallelism: Parallelism::available(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DropSummary {
    pub overflow: u64,
    pub link_down: u64,
    pub no_route: u64,
    pub first_ns: Option<u64>,
    pub last_ns: Option<u64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct JobSummary {
    pub scenario: String,
    pub scheme: String,
    pub load: f64,
    pub seed: u64,
    pub git: String,
    pub normalization: String,
    pub duration_ns: u64,
    pub unfinished_flows: usize,
    pub stats: SimStats,
    pub fct: Vec<FctStats>,
    pub regimes: Vec<RegimeSummary>,
    pub queue: Option<QueueSummary>,
    pub drops: DropSummary,
    pub failed_links: Vec<usize>,
    pub config: serde_json::Value,
}

impl JobSummary {
    pub fn bucket(&self, b: Bucket) -> &FctStats {
        self.fct.iter().find(|s| s.bucket == b).expect("all buckets present")
    }
}

/// One (load, seed, scheme) combination.
#[derive(Debug, Clone)]
pub struct Job {
    pub load_idx: usize,
    pub seed: u64,
    pub scheme: Scheme,
    pub setup: AgentSetup,
    pub label: String,
}

pub fn jobs(sc: &Scenario, seed_offset: u64) -> Vec<Job> {
    let mut out = Vec::new();
    for load_idx in 0..sc.schedules.len() {
        for &seed in &sc.file.seeds {
            for scheme in &sc.schemes {
                out.push(Job {
                    load_idx,
                    seed: seed + seed_offset,
                    scheme: *scheme,
                    setup: sc.setup.clone(),
                    label: scheme.label(),
                });
            }
        }
    }
    out
}

/// Background plus incast flows for the measured run. Every scheme sees the
/// same trace for a given (load, seed).
pub fn measured_flows(sc: &Scenario, load_idx: usize, seed: u64) -> Result<Vec<FlowSpec>> {
    draw(sc, &sc.schedules[load_idx].1, stream_seed(seed, TRAFFIC_STREAM, load_idx as u64), sc.duration_ns)
}

fn draw(sc: &Scenario, schedule: &WorkloadSchedule, seed: u64, duration_ns: u64) -> Result<Vec<FlowSpec>> {
    let topo = &sc.file.topology;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_flows(&mut rng, schedule, topo.host_count(), topo.host_rate_bps, SimTime(duration_ns))
}

/// Fabric links taken down by the failure scenario, and the transitions.
pub fn failure_events(sc: &Scenario, seed: u64) -> (Vec<usize>, Vec<LinkEvent>) {
    let Some((fraction, down, up)) = sc.failures else {
        return (Vec::new(), Vec::new());
    };
    let n_links = sc.file.topology.fabric_link_count();
    let n = ((fraction * n_links as f64).ceil() as usize).clamp(1, n_links);
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, FAILURE_STREAM, 0));
    let mut links = sample(&mut rng, n_links, n).into_vec();
    links.sort_unstable();
    let mut events = Vec::new();
    for &link in &links {
        events.push(LinkEvent { link, up: false, at_ns: down });
        events.push(LinkEvent { link, up: true, at_ns: up });
    }
    (links, events)
}

/// Models used for the measured PET run: a checkpoint or pretraining,
/// followed by the optional online warm-up.
pub fn prepare_models(
    sc: &Scenario,
    setup: &AgentSetup,
    cfg: &SimConfig,
    load_idx: usize,
    seed: u64,
) -> Result<(Vec<ModelState>, Option<TrainingReport>)> {
    let schedule = &sc.schedules[load_idx].1;
    let pet = &sc.file.pet;
    let (mut models, report) = match &sc.checkpoint {
        Some(path) => (checkpoint::load(path)?, None),
        None => {
            let dur = (pet.pretrain_duration_s * 1e9) as u64;
            let traces = (0..pet.pretrain_traces)
                .map(|i| draw(sc, schedule, stream_seed(seed, PRETRAIN_STREAM, i as u64), dur))
                .collect::<Result<Vec<_>>>()?;
            let mut pcfg = cfg.clone();
            pcfg.seed = stream_seed(seed, PRETRAIN_STREAM, u64::MAX);
            let (models, report) = pretrain(&pcfg, setup, &traces, pet.pretrain_episodes, PRETRAIN_DRAIN_NS)?;
            (models, (pet.pretrain_episodes > 0).then_some(report))
        }
    };
    if pet.online_s > 0.0 {
        let dur = (pet.online_s * 1e9) as u64;
        let flows = draw(sc, schedule, stream_seed(seed, WARMUP_STREAM, 0), dur)?;
        let mut wcfg = cfg.clone();
        wcfg.record_queue = false;
        wcfg.record_states = false;
        wcfg.seed = stream_seed(seed, WARMUP_STREAM, 1);
        let out = run_online(models, &wcfg, setup, flows, &[], dur, 0, wcfg.seed)?;
        models = out.models();
    }
    Ok((models, report))
}

/// Runs one job in memory.
pub fn execute_job(sc: &Scenario, job: &Job) -> Result<(RunOutput, Option<TrainingReport>, Vec<usize>)> {
    let cfg = sc.sim_config(job.seed)?;
    let flows = measured_flows(sc, job.load_idx, job.seed)?;
    let (failed, links) = failure_events(sc, job.seed);
    match job.scheme.static_config(sc.file.p_max) {
        Some(ecn) => {
            let out = run_policy(cfg, EcnPolicy::Static(ecn), flows, &links, sc.duration_ns, sc.drain_ns)?;
            Ok((out, None, failed))
        }
        None => {
            let (models, report) = prepare_models(sc, &job.setup, &cfg, job.load_idx, job.seed)?;
            let out = match sc.file.pet.eval {
                PetEval::Online => run_online(
                    models,
                    &cfg,
                    &job.setup,
                    flows,
                    &links,
                    sc.duration_ns,
                    sc.drain_ns,
                    stream_seed(job.seed, 0x0411, 0),
                )?,
                PetEval::Frozen => run_frozen(models, &cfg, &job.setup, flows, &links, sc.duration_ns, sc.drain_ns)?,
            };
            Ok((out, report, failed))
        }
    }
}

pub fn summarize_output(sc: &Scenario, job: &Job, out: &RunOutput, failed: Vec<usize>) -> JobSummary {
    let sim = &out.sim;
    let fcts = sim.fct_records();
    let count = |c: DropCause| sim.drop_log().iter().filter(|d| d.cause == c).count() as u64;
    let mut config = sc.to_json();
    if let serde_json::Value::Object(m) = &mut config {
        m.insert("masked".into(), serde_json::json!(job.setup.masked));
    }
    JobSummary {
        scenario: sc.file.name.clone(),
        scheme: job.label.clone(),
        load: sc.schedules[job.load_idx].0,
        seed: job.seed,
        git: git_describe().to_string(),
        normalization: NORMALIZATION.to_string(),
        duration_ns: out.duration_ns,
        unfinished_flows: sim.unfinished_flows(),
        stats: sim.stats(),
        fct: summarize_fct(fcts),
        regimes: summarize_regimes(fcts, &sc.regime_boundaries(), out.duration_ns),
        queue: summarize_queue(sim.queue_samples(), out.duration_ns),
        drops: DropSummary {
            overflow: count(DropCause::Overflow),
            link_down: count(DropCause::LinkDown),
            no_route: count(DropCause::NoRoute),
            first_ns: sim.drop_log().iter().map(|d| d.t_ns).min(),
            last_ns: sim.drop_log().iter().map(|d| d.t_ns).max(),
        },
        failed_links: failed,
        config,
    }
}

pub fn job_dir(root: &Path, sc: &Scenario, job: &Job) -> PathBuf {
    root.join(format!("load{:.2}", sc.schedules[job.load_idx].0))
        .join(format!("seed{}", job.seed))
        .join(&job.label)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, v)?;
    writeln!(f)?;
    Ok(())
}

fn mark_partial(dir: &Path, what: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(PARTIAL_MARKER), format!("{what} did not finish\n"))?;
    Ok(())
}

/// Runs one job and writes its bundle into `dir`.
pub fn run_job_to_dir(sc: &Scenario, job: &Job, dir: &Path) -> Result<JobSummary> {
    mark_partial(dir, &job.label)?;
    let (out, report, failed) = execute_job(sc, job)?;
    let topo = &sc.file.topology;
    write_fct_csv(&dir.join("fct.csv"), out.sim.fct_records())?;
    if sc.file.record_queue {
        write_queue_csv(&dir.join("queue.csv"), topo, out.sim.queue_samples())?;
    }
    if sc.file.record_states {
        write_states_csv(&dir.join("states.csv"), out.sim.state_log())?;
    }
    if let Some(r) = &report {
        r.write_csv(&dir.join("training.csv"))?;
    }
    let summary = summarize_output(sc, job, &out, failed);
    write_json(&dir.join("summary.json"), &summary)?;
    fs::remove_file(dir.join(PARTIAL_MARKER))?;
    Ok(summary)
}

fn write_index(root: &Path, summaries: &[JobSummary]) -> Result<()> {
    write_json(&root.join("summary.json"), &summaries)?;
    let mut w = std::io::BufWriter::new(fs::File::create(root.join("summary.csv"))?);
    writeln!(w, "scheme,load,seed,bucket,count,mean_norm,p99_norm,queue_mean_kb,queue_var_kb2")?;
    for s in summaries {
        for b in &s.fct {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                s.scheme,
                s.load,
                s.seed,
                b.bucket.label(),
                b.count,
                opt(b.mean_norm),
                opt(b.p99_norm),
                opt(s.queue.map(|q| q.mean_kb)),
                opt(s.queue.map(|q| q.var_kb2)),
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Runs every job of the scenario under `opts.out`. A `PARTIAL` marker
/// stays behind in any directory whose run did not complete.
pub fn run_experiment(sc: &Scenario, opts: &RunOptions) -> Result<Vec<JobSummary>> {
    mark_partial(&opts.out, &sc.file.name)?;
    let list = jobs(sc, opts.seed_offset);
    let results = par::map(list, opts.parallelism, |job| {
        let dir = job_dir(&opts.out, sc, &job);
        log::info!("running {} load {:.2} seed {}", job.label, sc.schedules[job.load_idx].0, job.seed);
        run_job_to_dir(sc, &job, &dir)
    });
    let summaries = results.into_iter().collect::<Result<Vec<_>>>()?;
    write_index(&opts.out, &summaries)?;
    fs::remove_file(opts.out.join(PARTIAL_MARKER))?;
    Ok(summaries)
}

/// Evaluates a checkpoint on every PET job of the scenario (static schemes
/// are run unchanged as references).
pub fn evaluate_checkpoint(sc: &Scenario, ckpt: &Path, opts: &RunOptions) -> Result<Vec<JobSummary>> {
    let mut sc = sc.clone();
    sc.checkpoint = Some(ckpt.to_path_buf());
    if !sc.schemes.contains(&Scheme::Pet) {
        sc.schemes.insert(0, Scheme::Pet);
    }
    run_experiment(&sc, opts)
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub load: f64,
    pub seed: u64,
    pub mean_norm_all: Option<f64>,
    pub p99_norm_small: Option<f64>,
    pub mean_norm_large: Option<f64>,
    /// Relative change of the overall mean against the unmasked model.
    pub vs_full: Option<f64>,
}

pub fn ablation_variants() -> Vec<(&'static str, Vec<usize>)> {
    vec![
        ("full", vec![]),
        ("no_incast", vec![IDX_INCAST]),
        ("no_ratio", vec![IDX_RATIO]),
        ("no_incast_ratio", vec![IDX_INCAST, IDX_RATIO]),
    ]
}

/// PET with state components zeroed out, compared against the full state.
/// Writes `ablation.csv` and `ablation.json` under `opts.out`.
pub fn run_ablation(sc: &Scenario, opts: &RunOptions) -> Result<Vec<AblationRow>> {
    mark_partial(&opts.out, "ablation")?;
    let mut list = Vec::new();
    for load_idx in 0..sc.schedules.len() {
        for &seed in &sc.file.seeds {
            for (name, masked) in ablation_variants() {
                let mut setup = sc.setup.clone();
                setup.masked = masked;
                list.push(Job {
                    load_idx,
                    seed: seed + opts.seed_offset,
                    scheme: Scheme::Pet,
                    setup,
                    label: name.to_string(),
                });
            }
        }
    }
    let summaries = par::map(list, opts.parallelism, |job| {
        run_job_to_dir(sc, &job, &job_dir(&opts.out, sc, &job))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let full = |s: &JobSummary| {
        summaries
            .iter()
            .find(|f| f.scheme == "full" && f.seed == s.seed && f.load == s.load)
            .and_then(|f| f.bucket(Bucket::All).mean_norm)
    };
    let rows: Vec<AblationRow> = summaries
        .iter()
        .map(|s| {
            let all = s.bucket(Bucket::All).mean_norm;
            AblationRow {
                variant: s.scheme.clone(),
                load: s.load,
                seed: s.seed,
                mean_norm_all: all,
                p99_norm_small: s.bucket(Bucket::Small).p99_norm,
                mean_norm_large: s.bucket(Bucket::Large).mean_norm,
                vs_full: all.zip(full(s)).map(|(a, f)| relative_change(a, f)),
            }
        })
        .collect();
    let mut w = csv::Writer::from_path(opts.out.join("ablation.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    write_json(&opts.out.join("ablation.json"), &rows)?;
    fs::remove_file(opts.out.join(PARTIAL_MARKER))?;
    Ok(rows)
}

pub const SUMMARY_HEADER: &str = "run,bucket,count,mean_norm,p99_norm,mean_fct_ns,queue_mean_kb,queue_var_kb2";

/// Recomputes summaries from every `fct.csv` below `input` and writes one
/// CSV row per (run directory, bucket). Output depends only on the bundle.
pub fn summarize_dir(input: &Path, out: &Path) -> Result<usize> {
    let mut dirs: Vec<PathBuf> = walkdir::WalkDir::new(input)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name() == "fct.csv")
        .filter_map(|e| e.path().parent().map(Path::to_path_buf))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(PetError::Empty("no fct.csv found below the input directory"));
    }
    let mut w = std::io::BufWriter::new(fs::File::create(out)?);
    writeln!(w, "{SUMMARY_HEADER}")?;
    for dir in &dirs {
        let records = read_fct_csv(&dir.join("fct.csv"))?;
        let until = fs::read_to_string(dir.join("summary.json"))
            .ok()
            .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
            .and_then(|v| v.get("duration_ns").and_then(|d| d.as_u64()))
            .unwrap_or(u64::MAX);
        let queue = match dir.join("queue.csv") {
            p if p.exists() => summarize_queue(&read_queue_csv(&p)?, until),
            _ => None,
        };
        let rel = dir.strip_prefix(input).unwrap_or(dir).to_string_lossy().replace('\\', "/");
        let rel = if rel.is_empty() { ".".to_string() } else { rel };
        for b in summarize_fct(&records) {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                rel,
                b.bucket.label(),
                b.count,
                opt(b.mean_norm),
                opt(b.p99_norm),
                opt(b.mean_fct_ns),
                opt(queue.map(|q| q.mean_kb)),
                opt(queue.map(|q| q.var_kb2)),
            )?;
        }
    }
    w.flush()?;
    Ok(dirs.len())
}
